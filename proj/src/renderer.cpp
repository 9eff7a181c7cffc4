#include "neslam/renderer.hpp"

#include <algorithm>
#include <cmath>

namespace neslam {

double sdf_to_density(double s, double beta) {
    if (!(beta > 0)) throw ContractViolation("sdf_to_density: beta must be positive");
    return s <= 0 ? std::exp(s / beta) / (2 * beta)
                  : (1.0 - 0.5 * std::exp(-s / beta)) / beta;
}

std::vector<double> termination_weights(const std::vector<double>& sigma,
                                        const std::vector<double>& delta,
                                        bool printed_form) {
    if (sigma.size() != delta.size())
        throw ContractViolation("termination_weights: size mismatch");
    std::vector<double> w(sigma.size());
    double transmittance = 1.0;
    for (size_t k = 0; k < sigma.size(); ++k) {
        if (!(sigma[k] >= 0) || !(delta[k] > 0))
            throw ContractViolation("termination_weights: sigma >= 0, delta > 0 required");
        const double opacity =
            1.0 - std::exp(printed_form ? -sigma[k] : -sigma[k] * delta[k]);
        w[k] = transmittance * opacity;
        transmittance *= std::exp(-sigma[k] * delta[k]);
    }
    return w;
}

void RaySampleSet::finalize_deltas() {
    const int K = size();
    delta.resize(K);
    for (int k = 0; k + 1 < K; ++k) delta[k] = t[k + 1] - t[k];
    if (K >= 2) delta[K - 1] = t[K - 1] - t[K - 2];
    if (K == 1) delta[0] = 1e-3;
}

RayRender render_ray(const Ray&, const RaySampleSet& samples, double beta,
                     const SamplingConfig& cfg) {
    const int K = samples.size();
    RayRender out;
    if (K == 0) {
        out.low_opacity = true;
        return out;
    }
    std::vector<double> sigma_f(K), sigma_c(K);
    for (int k = 0; k < K; ++k) {
        sigma_f[k] = sdf_to_density(samples.s_hat[k], beta);
        sigma_c[k] = sdf_to_density(samples.s_coarse[k], beta);
    }
    out.w_fine = termination_weights(sigma_f, samples.delta, cfg.printed_termination);
    out.w_coarse = termination_weights(sigma_c, samples.delta, cfg.printed_termination);

    for (int k = 0; k < K; ++k) {
        out.weight_sum_fine += out.w_fine[k];
        out.weight_sum_coarse += out.w_coarse[k];
        out.depth_fine += out.w_fine[k] * samples.t[k];
        out.depth_coarse += out.w_coarse[k] * samples.t[k];
        if (!samples.color.empty())
            for (int c = 0; c < 3; ++c) out.color[c] += out.w_fine[k] * samples.color[3 * k + c];
    }
    double var_f = 0, var_c = 0;
    for (int k = 0; k < K; ++k) {
        var_f += out.w_fine[k] * (out.depth_fine - samples.t[k]) * (out.depth_fine - samples.t[k]);
        var_c += out.w_coarse[k] * (out.depth_coarse - samples.t[k]) *
                 (out.depth_coarse - samples.t[k]);
    }
    out.std_fine = std::sqrt(std::max(0.0, var_f));
    out.std_coarse = std::sqrt(std::max(0.0, var_c));
    out.low_opacity = out.weight_sum_fine < cfg.low_opacity_threshold;
    return out;
}

RaySampleSet depth_guided_samples(const Ray& ray,
                                  std::optional<std::pair<double, double>> prior,
                                  std::optional<std::pair<double, double>> fallback,
                                  const SamplingConfig& cfg, Rng& rng) {
    RaySampleSet set;
    const double span = ray.t_far - ray.t_near;
    set.t.reserve(cfg.n_stratified + cfg.n_surface);
    set.source.reserve(cfg.n_stratified + cfg.n_surface);
    for (int k = 0; k < cfg.n_stratified; ++k) {
        set.t.push_back(ray.t_near + (k + rng.uniform()) / cfg.n_stratified * span);
        set.source.push_back(SampleSource::Stratified);
    }

    auto gauss_ok = [&](const std::optional<std::pair<double, double>>& g) {
        return g && std::isfinite(g->first) && std::isfinite(g->second) && g->first > 0 &&
               g->second >= 0;
    };
    std::optional<std::pair<double, double>> gauss;
    SampleSource src = SampleSource::Stratified;
    if (gauss_ok(prior)) {
        gauss = prior;
        src = SampleSource::DepthGaussian;
    } else if (gauss_ok(fallback)) {
        gauss = fallback;
        src = SampleSource::RenderGaussian;
    }
    for (int k = 0; k < cfg.n_surface; ++k) {
        double t;
        if (gauss) {
            t = std::clamp(rng.normal(gauss->first, gauss->second), ray.t_near, ray.t_far);
        } else {
            t = ray.t_near + (k + rng.uniform()) / cfg.n_surface * span;
        }
        set.t.push_back(t);
        set.source.push_back(gauss ? src : SampleSource::Stratified);
    }

    // Sort jointly, keep sources aligned, and nudge exact ties apart.
    std::vector<int> order(set.t.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    std::sort(order.begin(), order.end(),
              [&](int a, int b) { return set.t[a] < set.t[b]; });
    RaySampleSet sorted;
    sorted.t.reserve(set.t.size());
    sorted.source.reserve(set.t.size());
    for (int i : order) {
        double t = set.t[i];
        if (!sorted.t.empty() && t <= sorted.t.back()) t = sorted.t.back() + 1e-9;
        sorted.t.push_back(t);
        sorted.source.push_back(set.source[i]);
    }
    sorted.finalize_deltas();
    return sorted;
}

// ---------------------------------------------------------------------------
// tape-side batch rendering
// ---------------------------------------------------------------------------

namespace {

struct LevelRender {
    NodeId w, depth, var, wsum;
};

LevelRender render_level(Tape& t, NodeId sdf_rk, NodeId beta, NodeId ts_node,
                         const std::vector<double>& deltas, int R, int K,
                         bool printed_form) {
    const NodeId sigma = t.sdf_to_density(sdf_rk, beta);
    const NodeId sd = t.mul(sigma, t.constant(deltas, R, K));
    const NodeId transmittance = t.exp_(t.neg(t.cumsum_exclusive_rows(sd)));
    const NodeId opacity = t.affine(t.neg(t.exp_(t.neg(printed_form ? sigma : sd))), 1.0, 1.0);
    LevelRender lr;
    lr.w = t.mul(transmittance, opacity);
    lr.wsum = t.rowsum(lr.w);
    lr.depth = t.rowsum(t.mul(lr.w, ts_node));
    const NodeId diff = t.sub_colvec(ts_node, lr.depth);
    lr.var = t.rowsum(t.mul(lr.w, t.square(diff)));
    return lr;
}

}  // namespace

RayRenderNodes render_batch(Tape& t, const SceneModel& model, const SceneLeaves& leaves,
                            NodeId points, const std::vector<double>& ts, int R, int K,
                            const RenderOptions& opts) {
    if (ts.size() != static_cast<size_t>(R) * K)
        throw ContractViolation("render_batch: t grid size mismatch");
    std::vector<double> deltas(ts.size());
    for (int r = 0; r < R; ++r) {
        for (int k = 0; k + 1 < K; ++k)
            deltas[r * K + k] = ts[r * K + k + 1] - ts[r * K + k];
        deltas[r * K + K - 1] = K >= 2 ? ts[r * K + K - 1] - ts[r * K + K - 2] : 1e-3;
    }

    const bool need_coarse = opts.need_coarse || opts.need_color;
    const SdfBatch geo = batch_query_sdf(t, model, leaves, points, need_coarse);
    const NodeId ts_node = t.constant(ts, R, K);

    RayRenderNodes out;
    const LevelRender fine = render_level(t, t.reshape(geo.s_hat, R, K), leaves.beta,
                                          ts_node, deltas, R, K, opts.printed_termination);
    out.w_fine = fine.w;
    out.depth_fine = fine.depth;
    out.var_fine = fine.var;
    out.wsum_fine = fine.wsum;
    if (opts.need_coarse) {
        const LevelRender coarse =
            render_level(t, t.reshape(geo.s_coarse, R, K), leaves.beta, ts_node, deltas, R,
                         K, opts.printed_termination);
        out.w_coarse = coarse.w;
        out.depth_coarse = coarse.depth;
        out.var_coarse = coarse.var;
        out.wsum_coarse = coarse.wsum;
    }
    if (opts.need_color) {
        const NodeId rgb = batch_query_color(t, model, leaves, points, geo);  // [(RK) x 3]
        std::vector<NodeId> chans;
        for (int c = 0; c < 3; ++c) {
            const NodeId ch = t.reshape(t.slice_cols(rgb, c, c + 1), R, K);
            chans.push_back(t.rowsum(t.mul(out.w_fine, ch)));
        }
        out.color = t.concat_cols(chans);
    }
    return out;
}

// ---------------------------------------------------------------------------
// numeric batched query + image rendering
// ---------------------------------------------------------------------------

namespace {

void trilerp_numeric(const FeatureGrid& g, const std::vector<double>& pts, int N,
                     MatXR& out) {
    const GridMeta& m = g.meta;
    const int F = m.feature_dim;
    out.resize(N, F);
    for (int i = 0; i < N; ++i) {
        const double ux = (pts[3 * i] - m.origin.x()) / m.voxel;
        const double uy = (pts[3 * i + 1] - m.origin.y()) / m.voxel;
        const double uz = (pts[3 * i + 2] - m.origin.z()) / m.voxel;
        const int ix = std::clamp(static_cast<int>(std::floor(ux)), 0, m.nx - 2);
        const int iy = std::clamp(static_cast<int>(std::floor(uy)), 0, m.ny - 2);
        const int iz = std::clamp(static_cast<int>(std::floor(uz)), 0, m.nz - 2);
        const double fx = std::clamp(ux - ix, 0.0, 1.0);
        const double fy = std::clamp(uy - iy, 0.0, 1.0);
        const double fz = std::clamp(uz - iz, 0.0, 1.0);
        out.row(i).setZero();
        for (int dx = 0; dx < 2; ++dx)
            for (int dy = 0; dy < 2; ++dy)
                for (int dz = 0; dz < 2; ++dz) {
                    const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) * (dz ? fz : 1 - fz);
                    if (w == 0.0) continue;
                    out.row(i) += w * MapConstMat(g.features.value.data(),
                                                  m.vertex_count(), F)
                                          .row(m.vertex_index(ix + dx, iy + dy, iz + dz));
                }
    }
}

MatXR run_mlp_numeric(const Mlp& mlp, MatXR in) {
    for (size_t l = 0; l < mlp.weights.size(); ++l) {
        const int out = static_cast<int>(mlp.biases[l].value.size());
        const int cin = static_cast<int>(in.cols());
        MapConstMat W(mlp.weights[l].value.data(), out, cin);
        MatXR y = in * W.transpose();
        y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(mlp.biases[l].value.data(), out);
        if (l + 1 < mlp.weights.size())
            in = y.cwiseMax(0.0);
        else if (mlp.sigmoid_output)
            in = (1.0 + (-y.array()).exp()).inverse();
        else
            in = std::move(y);
    }
    return in;
}

}  // namespace

NumericSceneQuery query_scene_numeric(const SceneModel& model, const std::vector<double>& pts,
                                      int N, bool need_coarse, bool need_color) {
    NumericSceneQuery q;
    const int m = model.encoding.num_frequencies;
    const int E = 2 * m + 3;
    MatXR enc(N, E);
    {
        MapConstMat P(pts.data(), N, 3);
        MapConstMat Freq(model.encoding.frequencies.data(), m, 3);
        MatXR u = P * Freq.transpose();
        enc.block(0, 0, N, m) = u.array().sin();
        enc.block(0, m, N, m) = u.array().cos();
        enc.block(0, 2 * m, N, 3) = P;
    }
    MatXR f1, f2;
    trilerp_numeric(model.mid, pts, N, f1);
    trilerp_numeric(model.fine, pts, N, f2);

    MatXR mid_in(N, E + f1.cols());
    mid_in << enc, f1;
    MatXR mid_out = run_mlp_numeric(model.dec_mid, std::move(mid_in));
    MatXR fine_in(N, E + f1.cols() + f2.cols());
    fine_in << enc, f1, f2;
    MatXR fine_out = run_mlp_numeric(model.dec_fine, std::move(fine_in));

    q.s_hat.resize(N);
    for (int i = 0; i < N; ++i) q.s_hat[i] = mid_out(i, 0) + fine_out(i, 0);

    MatXR coarse_out;
    if (need_coarse || need_color) {
        MatXR f0;
        trilerp_numeric(model.coarse, pts, N, f0);
        MatXR cin(N, E + f0.cols());
        cin << enc, f0;
        coarse_out = run_mlp_numeric(model.dec_coarse, std::move(cin));
        q.s_coarse.resize(N);
        for (int i = 0; i < N; ++i) q.s_coarse[i] = coarse_out(i, 0);
    }
    if (need_color) {
        const int zd = model.config.geo_feature_dim;
        MatXR fc;
        trilerp_numeric(model.color_grid, pts, N, fc);
        MatXR cin(N, E + 3 * zd + fc.cols());
        cin << enc, coarse_out.rightCols(zd), mid_out.rightCols(zd), fine_out.rightCols(zd),
            fc;
        MatXR rgb = run_mlp_numeric(model.dec_color, std::move(cin));
        q.color.assign(rgb.data(), rgb.data() + static_cast<size_t>(N) * 3);
    }
    return q;
}

RenderedImage render_image(const SceneModel& model, const Pose& pose, const Intrinsics& k,
                           const ImageRenderConfig& cfg) {
    RenderedImage img;
    img.rgb = ImageF(k.width, k.height, 3);
    img.depth = ImageF(k.width, k.height, 1);
    img.depth_std = ImageF(k.width, k.height, 1);
    img.depth_coarse = ImageF(k.width, k.height, 1);
    img.opacity = ImageF(k.width, k.height, 1);

    const double beta = model.beta_value();
    auto render_pixel = [&](int x, int y, std::optional<std::pair<double, double>> prior,
                            std::optional<std::pair<double, double>> fallback)
        -> std::optional<RayRender> {
        const auto ray = ray_for_pixel(pose, k, Vec2(x, y), model.config.bounds, cfg.t_near,
                                       cfg.t_far);
        if (!ray) return std::nullopt;
        Rng rng(seed_for(cfg.seed, 0, static_cast<uint64_t>(y) * k.width + x, 0));
        RaySampleSet set = depth_guided_samples(*ray, prior, fallback, cfg.sampling, rng);
        const int K = set.size();
        std::vector<double> pts(static_cast<size_t>(K) * 3);
        for (int s = 0; s < K; ++s) {
            const Vec3 p = ray->origin + set.t[s] * ray->direction;
            pts[3 * s] = p.x();
            pts[3 * s + 1] = p.y();
            pts[3 * s + 2] = p.z();
        }
        const NumericSceneQuery q = query_scene_numeric(model, pts, K, true, true);
        set.s_hat = q.s_hat;
        set.s_coarse = q.s_coarse;
        set.color = q.color;
        return render_ray(*ray, set, beta, cfg.sampling);
    };

    for (int y = 0; y < k.height; y += cfg.pixel_stride) {
        for (int x = 0; x < k.width; x += cfg.pixel_stride) {
            const Vec3 dir_cam = pixel_direction(Vec2(x, y), k);
            std::optional<std::pair<double, double>> prior;
            if (cfg.prior_depth && cfg.prior_std) {
                const double d = cfg.prior_depth->at(x, y);
                if (d > 0)
                    prior = std::make_pair(z_to_ray_t(d, dir_cam),
                                           cfg.prior_std->at(x, y) / dir_cam.z());
            }
            std::optional<RayRender> r;
            if (prior) {
                r = render_pixel(x, y, prior, std::nullopt);
            } else if (cfg.two_pass) {
                const auto first = render_pixel(x, y, std::nullopt, std::nullopt);
                if (first && !first->low_opacity && first->weight_sum_fine > 0.5) {
                    r = render_pixel(
                        x, y, std::nullopt,
                        std::make_pair(first->depth_fine, std::max(first->std_fine, 0.01)));
                } else {
                    r = first;
                }
            } else {
                r = render_pixel(x, y, std::nullopt, std::nullopt);
            }
            if (!r) continue;
            for (int c = 0; c < 3; ++c) img.rgb.at(x, y, c) = r->color[c];
            img.depth.at(x, y) = ray_t_to_z(r->depth_fine, dir_cam);
            img.depth_std.at(x, y) = r->std_fine * dir_cam.z();
            img.depth_coarse.at(x, y) = ray_t_to_z(r->depth_coarse, dir_cam);
            img.opacity.at(x, y) = r->weight_sum_fine;
        }
    }
    return img;
}

}  // namespace neslam
