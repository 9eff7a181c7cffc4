#pragma once

#include "neslam/core.hpp"

#include <deque>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

namespace neslam {

enum class ParamRole {
    GridFeature,
    DecoderWeight,
    PoseTangent,
    ColorGrid,
    Beta,
    DetectorWeight,
    PropagationParam,
};

/// A flat block of optimizable values. `grad` is the optimizer-side
/// accumulator, filled via Tape::backward results; it always matches
/// `value` in size once touched.
struct Parameter {
    std::string name;
    ParamRole role = ParamRole::GridFeature;
    bool trainable = true;
    std::vector<double> value;
    std::vector<double> grad;

    Parameter() = default;
    Parameter(std::string n, ParamRole r, std::vector<double> v, bool train = true)
        : name(std::move(n)), role(r), trainable(train), value(std::move(v)) {}

    size_t size() const { return value.size(); }
    void zero_grad() { grad.assign(value.size(), 0.0); }
    void ensure_grad() {
        if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    }
};

using NodeId = int32_t;
using GradientMap = std::map<const Parameter*, std::vector<double>>;

/// Regular lattice of feature vectors; nx/ny/nz count vertices per axis and F
/// is the feature dimension. Vertex (ix,iy,iz) owns row (ix*ny+iy)*nz+iz of
/// the backing parameter.
struct GridMeta {
    Vec3 origin = Vec3::Zero();
    double voxel = 1.0;
    int nx = 0, ny = 0, nz = 0;
    int feature_dim = 0;

    int vertex_count() const { return nx * ny * nz; }
    int vertex_index(int ix, int iy, int iz) const { return (ix * ny + iy) * nz + iz; }
};

/// Reverse-mode tape. Forward evaluation is eager: every op computes its
/// output immediately and records a pullback closure. Graphs are rebuilt each
/// optimization step, so the tape is reset (or discarded) per iteration.
///
/// Values and gradients are 64-bit throughout. All matrices are row-major
/// [rows x cols] flat arrays.
class Tape {
 public:
    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    // ---- node creation -------------------------------------------------
    NodeId constant(std::vector<double> v, int rows, int cols);
    NodeId constant_scalar(double v) { return constant({v}, 1, 1); }
    /// Snapshot of the parameter's current values. Trainable parameters
    /// receive gradients from backward(); non-trainable ones behave like
    /// constants.
    NodeId leaf(const Parameter& p, int rows, int cols);

    // ---- elementwise unary ----------------------------------------------
    NodeId neg(NodeId a);
    NodeId exp_(NodeId a);
    NodeId log_(NodeId a);
    NodeId sqrt_(NodeId a);
    NodeId sin_(NodeId a);
    NodeId cos_(NodeId a);
    NodeId square(NodeId a);
    NodeId abs_(NodeId a);   // subgradient 0 at 0
    NodeId relu(NodeId a);   // subgradient 0 at 0
    NodeId softplus(NodeId a);
    NodeId sigmoid(NodeId a);
    NodeId reciprocal(NodeId a);
    NodeId clamp_min(NodeId a, double floor);  // gradient blocked where clamped
    /// y = scale * x + shift (compile-time constants).
    NodeId affine(NodeId a, double scale, double shift);

    // ---- elementwise binary (same shape) --------------------------------
    NodeId add(NodeId a, NodeId b);
    NodeId sub(NodeId a, NodeId b);
    NodeId mul(NodeId a, NodeId b);

    // ---- broadcasts ------------------------------------------------------
    NodeId add_colvec(NodeId x, NodeId v);  // v: [R x 1] added to every column
    NodeId sub_colvec(NodeId x, NodeId v);
    NodeId mul_colvec(NodeId x, NodeId v);
    NodeId mul_scalar(NodeId x, NodeId s);  // s: [1 x 1]

    // ---- reductions -------------------------------------------------------
    NodeId sum_all(NodeId a);             // -> [1 x 1]
    NodeId mean_all(NodeId a);            // -> [1 x 1]
    NodeId rowsum(NodeId a);              // [R x C] -> [R x 1]

    // ---- shape -------------------------------------------------------------
    NodeId reshape(NodeId a, int rows, int cols);
    NodeId concat_cols(const std::vector<NodeId>& parts);
    NodeId slice_cols(NodeId a, int col_begin, int col_end);
    NodeId gather_rows(NodeId a, std::vector<int> row_indices);

    // ---- linear algebra ----------------------------------------------------
    /// y = x * W^T (+ bias). x: [N x in], w: [out x in], bias: [1 x out] or -1.
    NodeId linear(NodeId x, NodeId w, NodeId bias);

    // ---- neural ops ----------------------------------------------------------
    /// 3x3 convolution, stride 1, zero padding 1. x: [Cin x H*W],
    /// w: [Cout x Cin*9], bias: [1 x Cout] or -1. Returns [Cout x H*W].
    NodeId conv3x3(NodeId x, NodeId w, NodeId bias, int height, int width);
    /// 2x2 average pooling; height and width must be even.
    NodeId avgpool2(NodeId x, int height, int width);
    NodeId softmax_rows(NodeId a);
    /// Per-row cross entropy -log softmax(x)[target]. Rows with mask 0 yield 0
    /// and receive no gradient. mask may be empty (all rows active).
    NodeId cross_entropy_rows(NodeId logits, std::vector<int> targets,
                              std::vector<uint8_t> mask);

    // ---- rendering ops -----------------------------------------------------
    /// VolSDF-style density: s <= 0 -> exp(s/b)/(2b), s > 0 -> (1 - exp(-s/b)/2)/b.
    /// beta is a [1 x 1] node and must be positive.
    NodeId sdf_to_density(NodeId s, NodeId beta);
    /// y[r,k] = sum_{j<k} x[r,j].
    NodeId cumsum_exclusive_rows(NodeId a);

    // ---- geometry ops ----------------------------------------------------
    enum class Se3Kind { Point, Vector, InversePoint };
    /// Applies the tangent delta = (w[3], v[3]) to constant points:
    ///   Point:        y = exp(w) x + v
    ///   Vector:       y = exp(w) x
    ///   InversePoint: y = exp(w)^T (x - v)
    /// delta: [1 x 6] node; points: [N x 3] constant data.
    NodeId se3_transform(NodeId delta, const std::vector<double>& points, Se3Kind kind);
    /// y[r*K + k] = origin + t[r,k] * dirs[r].  origin: [1 x 3], dirs: [R x 3],
    /// ts: [R x K] constant.
    NodeId ray_points(NodeId origin, NodeId dirs, const std::vector<double>& ts,
                      int num_rays, int samples_per_ray);

    // ---- grid interpolation -----------------------------------------------
    /// Trilinear interpolation of grid features at query points. grid:
    /// [vertex_count x F] node; points: [N x 3] node (differentiable w.r.t.
    /// both unless constant). Query points are clamped to the grid box.
    NodeId trilerp(NodeId grid, NodeId points, const GridMeta& meta);
    /// Spatial derivative d(trilerp)/d(point[axis]): [N x F]. Points must be a
    /// constant node (used by the eikonal forward-mode pipeline).
    NodeId trilerp_dx(NodeId grid, NodeId points, const GridMeta& meta, int axis);

    // ---- access --------------------------------------------------------------
    const std::vector<double>& val(NodeId id) const { return nodes_[id].val; }
    double scalar(NodeId id) const;
    int rows(NodeId id) const { return nodes_[id].rows; }
    int cols(NodeId id) const { return nodes_[id].cols; }
    bool needs_grad(NodeId id) const { return nodes_[id].needs_grad; }
    size_t node_count() const { return nodes_.size(); }

    /// Reverse sweep from a scalar seed node. Node gradients are recomputed
    /// from scratch on every call, so repeated calls return identical maps.
    /// Only trainable parameters appear in the result.
    GradientMap backward(NodeId seed);

    /// Gradient of the last backward() w.r.t. a node (empty if none reached it).
    const std::vector<double>& node_grad(NodeId id) const { return nodes_[id].grad; }

    void reset();

 private:
    struct Node {
        int rows = 0, cols = 0;
        std::vector<double> val;
        std::vector<double> grad;
        bool needs_grad = false;
        const Parameter* param = nullptr;
    };

    NodeId make_node(int rows, int cols, bool needs_grad);
    std::vector<double>& grad_buf(NodeId id);
    void check_same_shape(NodeId a, NodeId b, const char* op) const;

    template <typename Fwd, typename Bwd>
    NodeId unary_op(NodeId a, Fwd fwd, Bwd dfdx);

    // Deque: ops keep references to existing nodes while appending new ones.
    std::deque<Node> nodes_;
    std::vector<std::function<void()>> pullbacks_;
};

/// Accumulates a backward() result into Parameter::grad fields.
void accumulate_gradients(const GradientMap& grads);

struct FdBlockReport {
    std::string name;
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    int entries_checked = 0;
};

struct FdReport {
    std::vector<FdBlockReport> blocks;
    double max_rel_err = 0.0;
    bool nonfinite_encountered = false;

    bool within(double tolerance) const {
        return !nonfinite_encountered && max_rel_err < tolerance;
    }
};

/// Central-difference check of analytic gradients. `fn` evaluates the scalar
/// objective at the parameters' current values; when the map pointer is
/// non-null it must also fill analytic gradients (one tape build + backward).
/// Non-finite objective values at perturbed points are reported, not thrown.
/// max_entries 0 checks every entry; otherwise a seeded random subset per block.
FdReport finite_diff_check(const std::function<double(GradientMap*)>& fn,
                           const std::vector<Parameter*>& params, double step,
                           int max_entries = 0, uint64_t seed = 1);

}  // namespace neslam
