#pragma once

#include "neslam/core.hpp"
#include "neslam/sdf_primitives.hpp"
#include "neslam/tape.hpp"

#include <array>
#include <memory>
#include <string>

namespace neslam {

struct EncodingConfig {
    int num_frequencies = 16;  // sin/cos pairs
    double scale = 10.0;       // stddev of the Gaussian frequency rows
    uint64_t seed = 42;
};

/// Gaussian positional encoding [sin(2*pi*B p); cos(2*pi*B p); p].
struct PositionalEncoding {
    int num_frequencies = 0;
    std::vector<double> frequencies;  // [m x 3], already includes the 2*pi factor

    static PositionalEncoding create(const EncodingConfig& cfg);
    int dim() const { return 2 * num_frequencies + 3; }
    void encode(const Vec3& p, double* out) const;
    std::vector<double> encode(const Vec3& p) const;
};

struct FeatureGrid {
    GridMeta meta;
    Parameter features;  // [vertex_count x feature_dim]

    static FeatureGrid create(const std::string& name, ParamRole role, const Aabb& bounds,
                              double voxel, int feature_dim);
};

/// Dense stack with ReLU between layers; the output layer is linear unless
/// sigmoid_output is set.
struct Mlp {
    std::vector<Parameter> weights;  // [out x in] per layer
    std::vector<Parameter> biases;   // [1 x out] per layer
    bool sigmoid_output = false;

    static Mlp create(const std::string& name, ParamRole role,
                      const std::vector<int>& layer_dims, bool sigmoid_output,
                      uint64_t seed);
    int input_dim() const;
    int output_dim() const;
    void forward(const double* in, double* out) const;
    void set_trainable(bool trainable);
    uint64_t checksum() const;
};

struct SceneConfig {
    Aabb bounds{Vec3(-3, -3, -3), Vec3(3, 3, 3)};
    double coarse_voxel = 2.0;
    double mid_voxel = 0.32;
    double fine_voxel = 0.16;
    double color_voxel = 0.16;
    int feature_dim = 32;       // per grid level
    int geo_feature_dim = 32;   // z vector width emitted by geometry decoders
    int hidden_dim = 64;
    int geo_layers = 5;
    int color_layers = 2;
    EncodingConfig encoding;
    double beta_init = 0.1;
    double beta_floor = 1e-3;
    uint64_t weight_seed = 7;
};

struct SdfQueryResult {
    double s_coarse = 0;
    double s_hat = 0;  // mid + fine residual
    std::vector<double> z0, z1, z2;
};

/// Hierarchical SDF + color scene: three geometry grids with frozen decoders,
/// a color grid with a trainable decoder, and the density sharpness beta.
/// Copying the model is the snapshot operation; all state lives in value types.
struct SceneModel {
    SceneConfig config;
    PositionalEncoding encoding;
    FeatureGrid coarse, mid, fine, color_grid;
    Mlp dec_coarse, dec_mid, dec_fine, dec_color;
    Parameter beta;

    static SceneModel create(const SceneConfig& cfg);

    /// Numeric hierarchy query; throws ContractViolation outside the bounds.
    SdfQueryResult query_sdf(const Vec3& p) const;
    double query_sdf_value(const Vec3& p) const { return query_sdf(p).s_hat; }
    Vec3 query_color(const Vec3& p, const std::vector<double>& z0,
                     const std::vector<double>& z1, const std::vector<double>& z2) const;

    double beta_value() const { return beta.value[0]; }
    bool in_bounds(const Vec3& p) const { return config.bounds.contains(p); }
    uint64_t geometry_checksum() const;

    void save(const std::string& path) const;
    static SceneModel load(const std::string& path);
};

/// Trilinear feature lookup with the out-of-bounds contract from the scene
/// interface (single-point convenience over the tape op).
std::vector<double> interpolate(const FeatureGrid& grid, const Vec3& point);

// ---------------------------------------------------------------------------
// Tape-side batched queries
// ---------------------------------------------------------------------------

/// Which parameter groups become differentiable leaves on a tape; everything
/// else enters as constants.
struct TrainSet {
    bool coarse_grid = false;
    bool mid_grid = false;
    bool fine_grid = false;
    bool color_grid = false;
    bool color_decoder = false;
    bool beta = false;
    bool geometry_decoders = false;  // only during pretraining

    static TrainSet none() { return {}; }
};

struct SceneLeaves {
    NodeId coarse_grid = -1, mid_grid = -1, fine_grid = -1, color_grid = -1;
    NodeId beta = -1;
    std::vector<NodeId> geo_w[3], geo_b[3];  // coarse, mid, fine
    std::vector<NodeId> color_w, color_b;
    NodeId enc_freq = -1;  // [m x 3] constant
};

SceneLeaves make_scene_leaves(Tape& tape, const SceneModel& model, const TrainSet& train);

/// [N x (2m+3)] encoding of a batch of points.
NodeId batch_encode(Tape& tape, const SceneModel& model, const SceneLeaves& leaves,
                    NodeId points);

struct SdfBatch {
    NodeId s_coarse = -1;  // [N x 1]
    NodeId s_hat = -1;     // [N x 1], mid + fine residual
    NodeId z0 = -1, z1 = -1, z2 = -1;
};

/// Hierarchy query over a batch of points (node [N x 3]). Skips the coarse
/// head when need_coarse is false (its outputs stay -1).
SdfBatch batch_query_sdf(Tape& tape, const SceneModel& model, const SceneLeaves& leaves,
                         NodeId points, bool need_coarse);

/// [N x 3] colors in [0,1].
NodeId batch_query_color(Tape& tape, const SceneModel& model, const SceneLeaves& leaves,
                         NodeId points, const SdfBatch& geo);

/// Forward-mode spatial gradient d(s_hat)/dp as a tape node [N x 3];
/// differentiable w.r.t. grid features and (pretraining only) decoder weights.
/// Points must be a constant node.
NodeId batch_sdf_spatial_gradient(Tape& tape, const SceneModel& model,
                                  const SceneLeaves& leaves, NodeId points);

// ---------------------------------------------------------------------------
// Decoder pretraining
// ---------------------------------------------------------------------------

struct PretrainConfig {
    int steps = 1500;
    int batch = 512;
    double decoder_lr = 1e-3;
    double grid_lr = 1e-2;
    uint64_t seed = 99;
    double target_mean_abs_err = 0.05;  // meters, held-out
    int holdout = 512;
    /// Zero-feature response anchor: keeps the cold-start field slightly
    /// free-space so early rays produce usable gradients.
    double empty_space_sdf = -0.05;
    double anchor_weight = 0.1;
};

struct PretrainReport {
    double holdout_mean_abs_err = 0.0;
    bool reached_target = false;
    std::vector<double> per_scene_err;
};

/// Fits the three geometry decoders (jointly with scratch grids) to analytic
/// primitive scenes, then freezes them. On failure to reach the target the
/// report says so and the model keeps the best fit; callers may proceed with
/// a warning.
PretrainReport pretrain_decoders(SceneModel& model, const PretrainConfig& cfg);

}  // namespace neslam
