#pragma once

#include "neslam/geometry.hpp"
#include "neslam/rng.hpp"
#include "neslam/scene.hpp"

#include <optional>

namespace neslam {

enum class SampleSource : uint8_t { Stratified, DepthGaussian, RenderGaussian };

/// Ordered samples along one ray. Distances are ray lengths (not z-depth);
/// SDF and color slots are filled by scene queries before rendering.
struct RaySampleSet {
    std::vector<double> t;       // strictly increasing
    std::vector<double> delta;   // t_{j+1} - t_j, last repeats the final gap
    std::vector<double> s_hat;   // fine-level SDF per sample
    std::vector<double> s_coarse;
    std::vector<double> color;   // 3 per sample
    std::vector<SampleSource> source;

    int size() const { return static_cast<int>(t.size()); }
    void finalize_deltas();
};

struct RayRender {
    Vec3 color = Vec3::Zero();
    double depth_fine = 0, depth_coarse = 0;  // ray-length units
    double std_fine = 0, std_coarse = 0;
    double weight_sum_fine = 0, weight_sum_coarse = 0;
    bool low_opacity = false;
    std::vector<double> w_fine, w_coarse;
};

struct SamplingConfig {
    int n_stratified = 32;
    int n_surface = 16;
    /// Replicates the paper-printed termination weight (no delta inside the
    /// final factor) for comparison runs.
    bool printed_termination = false;
    double low_opacity_threshold = 1e-6;
};

/// Density transform; continuous at s = 0 where both branches give 1/(2 beta).
double sdf_to_density(double s, double beta);

/// Termination weights from per-sample densities and gaps.
std::vector<double> termination_weights(const std::vector<double>& sigma,
                                        const std::vector<double>& delta,
                                        bool printed_form = false);

/// Volume rendering of one ray at both hierarchy levels.
RayRender render_ray(const Ray& ray, const RaySampleSet& samples, double beta,
                     const SamplingConfig& cfg = {});

/// Stratified + depth-guided Gaussian samples. `prior` and `fallback` are
/// (mean, std) in ray-length units; the fallback chain is prior -> rendered
/// estimate -> extra stratified.
RaySampleSet depth_guided_samples(const Ray& ray,
                                  std::optional<std::pair<double, double>> prior,
                                  std::optional<std::pair<double, double>> fallback,
                                  const SamplingConfig& cfg, Rng& rng);

// ---------------------------------------------------------------------------
// Tape-side batched rendering
// ---------------------------------------------------------------------------

struct RenderOptions {
    bool need_coarse = true;
    bool need_color = true;
    bool printed_termination = false;
};

struct RayRenderNodes {
    NodeId w_fine = -1, w_coarse = -1;        // [R x K]
    NodeId color = -1;                        // [R x 3]
    NodeId depth_fine = -1, depth_coarse = -1;  // [R x 1]
    NodeId var_fine = -1, var_coarse = -1;      // [R x 1] squared std
    NodeId wsum_fine = -1, wsum_coarse = -1;    // [R x 1]
};

/// Renders R rays of K samples each. `points` is a [(R*K) x 3] node (constant
/// when poses are fixed, pose-differentiable in tracking); `ts` are the
/// matching ray-length distances.
RayRenderNodes render_batch(Tape& tape, const SceneModel& model, const SceneLeaves& leaves,
                            NodeId points, const std::vector<double>& ts, int num_rays,
                            int samples_per_ray, const RenderOptions& opts);

// ---------------------------------------------------------------------------
// Numeric (no-tape) rendering for evaluation and virtual views
// ---------------------------------------------------------------------------

/// Batched hierarchy query without a tape; fills row-major outputs.
struct NumericSceneQuery {
    std::vector<double> s_hat, s_coarse;  // [N]
    std::vector<double> color;            // [N x 3]
};
NumericSceneQuery query_scene_numeric(const SceneModel& model, const std::vector<double>& points,
                                      int count, bool need_coarse, bool need_color);

struct RenderedImage {
    ImageF rgb;          // 3 channels
    ImageF depth;        // z-depth meters
    ImageF depth_std;    // z-depth std
    ImageF depth_coarse;
    ImageF opacity;      // fine weight sum
};

struct ImageRenderConfig {
    SamplingConfig sampling;
    double t_near = 0.05;
    double t_far = 12.0;
    uint64_t seed = 0;
    int pixel_stride = 1;  // render every n-th pixel (others left at 0)
    /// Optional per-pixel depth prior (z-depth + std) guiding sampling.
    const ImageF* prior_depth = nullptr;
    const ImageF* prior_std = nullptr;
    /// Without a prior, a stratified prepass estimates depth for guided
    /// resampling.
    bool two_pass = true;
};

RenderedImage render_image(const SceneModel& model, const Pose& pose, const Intrinsics& k,
                           const ImageRenderConfig& cfg);

}  // namespace neslam
