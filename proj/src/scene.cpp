#include "neslam/scene.hpp"

#include "neslam/optim.hpp"
#include "neslam/rng.hpp"

#include <array>
#include <cmath>
#include <cstring>
#include <fstream>

namespace neslam {

// ---------------------------------------------------------------------------
// encoding
// ---------------------------------------------------------------------------

PositionalEncoding PositionalEncoding::create(const EncodingConfig& cfg) {
    PositionalEncoding enc;
    enc.num_frequencies = cfg.num_frequencies;
    enc.frequencies.resize(static_cast<size_t>(cfg.num_frequencies) * 3);
    Rng rng(cfg.seed);
    for (auto& f : enc.frequencies) f = 2.0 * M_PI * cfg.scale * rng.normal();
    return enc;
}

void PositionalEncoding::encode(const Vec3& p, double* out) const {
    const int m = num_frequencies;
    for (int i = 0; i < m; ++i) {
        const double u = frequencies[3 * i] * p.x() + frequencies[3 * i + 1] * p.y() +
                         frequencies[3 * i + 2] * p.z();
        out[i] = std::sin(u);
        out[m + i] = std::cos(u);
    }
    out[2 * m] = p.x();
    out[2 * m + 1] = p.y();
    out[2 * m + 2] = p.z();
}

std::vector<double> PositionalEncoding::encode(const Vec3& p) const {
    std::vector<double> out(dim());
    encode(p, out.data());
    return out;
}

// ---------------------------------------------------------------------------
// grids
// ---------------------------------------------------------------------------

FeatureGrid FeatureGrid::create(const std::string& name, ParamRole role,
                                const Aabb& bounds, double voxel, int feature_dim) {
    FeatureGrid g;
    g.meta.origin = bounds.lo;
    g.meta.voxel = voxel;
    const Vec3 ext = bounds.extent();
    g.meta.nx = std::max(1, static_cast<int>(std::ceil(ext.x() / voxel - 1e-9))) + 1;
    g.meta.ny = std::max(1, static_cast<int>(std::ceil(ext.y() / voxel - 1e-9))) + 1;
    g.meta.nz = std::max(1, static_cast<int>(std::ceil(ext.z() / voxel - 1e-9))) + 1;
    g.meta.feature_dim = feature_dim;
    g.features = Parameter(name, role,
                           std::vector<double>(static_cast<size_t>(g.meta.vertex_count()) *
                                                   feature_dim,
                                               0.0));
    return g;
}

std::vector<double> interpolate(const FeatureGrid& grid, const Vec3& point) {
    const GridMeta& m = grid.meta;
    const Vec3 hi = m.origin + m.voxel * Vec3(m.nx - 1, m.ny - 1, m.nz - 1);
    if (!(point.x() >= m.origin.x() && point.y() >= m.origin.y() &&
          point.z() >= m.origin.z() && point.x() <= hi.x() && point.y() <= hi.y() &&
          point.z() <= hi.z()))
        throw ContractViolation("interpolate: point outside grid bounds");
    Tape t;
    NodeId g = t.constant(grid.features.value, m.vertex_count(), m.feature_dim);
    NodeId out = t.trilerp(g, t.constant({point.x(), point.y(), point.z()}, 1, 3), m);
    return t.val(out);
}

// ---------------------------------------------------------------------------
// MLP
// ---------------------------------------------------------------------------

Mlp Mlp::create(const std::string& name, ParamRole role, const std::vector<int>& dims,
                bool sigmoid_output, uint64_t seed) {
    Mlp mlp;
    mlp.sigmoid_output = sigmoid_output;
    Rng rng(seed);
    for (size_t l = 0; l + 1 < dims.size(); ++l) {
        const int in = dims[l], out = dims[l + 1];
        std::vector<double> w(static_cast<size_t>(in) * out);
        const double std_ = std::sqrt(2.0 / in);
        for (auto& x : w) x = std_ * rng.normal();
        mlp.weights.emplace_back(name + ".w" + std::to_string(l), role, std::move(w));
        mlp.biases.emplace_back(name + ".b" + std::to_string(l), role,
                                std::vector<double>(out, 0.0));
    }
    return mlp;
}

int Mlp::input_dim() const {
    return static_cast<int>(weights.front().value.size() / biases.front().value.size());
}
int Mlp::output_dim() const { return static_cast<int>(biases.back().value.size()); }

void Mlp::forward(const double* in, double* out) const {
    Eigen::VectorXd h = Eigen::Map<const Eigen::VectorXd>(in, input_dim());
    for (size_t l = 0; l < weights.size(); ++l) {
        const int rows = static_cast<int>(biases[l].value.size());
        const int cols = static_cast<int>(h.size());
        MapConstMat W(weights[l].value.data(), rows, cols);
        Eigen::VectorXd y = W * h;
        y += Eigen::Map<const Eigen::VectorXd>(biases[l].value.data(), rows);
        if (l + 1 < weights.size())
            h = y.cwiseMax(0.0);
        else
            h = sigmoid_output ? Eigen::VectorXd((1.0 + (-y.array()).exp()).inverse())
                               : y;
    }
    Eigen::Map<Eigen::VectorXd>(out, h.size()) = h;
}

void Mlp::set_trainable(bool trainable) {
    for (auto& w : weights) w.trainable = trainable;
    for (auto& b : biases) b.trainable = trainable;
}

uint64_t Mlp::checksum() const {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&](const std::vector<double>& v) {
        for (double d : v) {
            uint64_t bits;
            std::memcpy(&bits, &d, 8);
            for (int i = 0; i < 8; ++i) {
                h ^= (bits >> (8 * i)) & 0xff;
                h *= 0x100000001b3ull;
            }
        }
    };
    for (const auto& w : weights) mix(w.value);
    for (const auto& b : biases) mix(b.value);
    return h;
}

// ---------------------------------------------------------------------------
// scene model
// ---------------------------------------------------------------------------

SceneModel SceneModel::create(const SceneConfig& cfg) {
    SceneModel m;
    m.config = cfg;
    m.encoding = PositionalEncoding::create(cfg.encoding);
    m.coarse = FeatureGrid::create("grid.coarse", ParamRole::GridFeature, cfg.bounds,
                                   cfg.coarse_voxel, cfg.feature_dim);
    m.mid = FeatureGrid::create("grid.mid", ParamRole::GridFeature, cfg.bounds,
                                cfg.mid_voxel, cfg.feature_dim);
    m.fine = FeatureGrid::create("grid.fine", ParamRole::GridFeature, cfg.bounds,
                                 cfg.fine_voxel, cfg.feature_dim);
    m.color_grid = FeatureGrid::create("grid.color", ParamRole::ColorGrid, cfg.bounds,
                                       cfg.color_voxel, cfg.feature_dim);

    const int enc_dim = 2 * cfg.encoding.num_frequencies + 3;
    const int out_dim = 1 + cfg.geo_feature_dim;
    auto geo_dims = [&](int in) {
        std::vector<int> dims{in};
        for (int l = 0; l < cfg.geo_layers - 1; ++l) dims.push_back(cfg.hidden_dim);
        dims.push_back(out_dim);
        return dims;
    };
    m.dec_coarse = Mlp::create("dec.coarse", ParamRole::DecoderWeight,
                               geo_dims(enc_dim + cfg.feature_dim), false,
                               cfg.weight_seed + 1);
    m.dec_mid = Mlp::create("dec.mid", ParamRole::DecoderWeight,
                            geo_dims(enc_dim + cfg.feature_dim), false, cfg.weight_seed + 2);
    m.dec_fine = Mlp::create("dec.fine", ParamRole::DecoderWeight,
                             geo_dims(enc_dim + 2 * cfg.feature_dim), false,
                             cfg.weight_seed + 3);

    std::vector<int> color_dims{enc_dim + 3 * cfg.geo_feature_dim + cfg.feature_dim};
    for (int l = 0; l < cfg.color_layers - 1; ++l) color_dims.push_back(cfg.hidden_dim);
    color_dims.push_back(3);
    m.dec_color = Mlp::create("dec.color", ParamRole::DecoderWeight, color_dims, true,
                              cfg.weight_seed + 4);

    m.beta = Parameter("beta", ParamRole::Beta, {cfg.beta_init});
    return m;
}

SdfQueryResult SceneModel::query_sdf(const Vec3& p) const {
    if (!in_bounds(p)) throw ContractViolation("query_sdf: point outside scene bounds");
    const std::vector<double> enc = encoding.encode(p);
    const std::vector<double> f0 = interpolate(coarse, p);
    const std::vector<double> f1 = interpolate(mid, p);
    const std::vector<double> f2 = interpolate(fine, p);

    auto run = [&](const Mlp& mlp, const std::vector<const std::vector<double>*>& parts) {
        std::vector<double> in;
        in.reserve(mlp.input_dim());
        for (auto* part : parts) in.insert(in.end(), part->begin(), part->end());
        std::vector<double> out(mlp.output_dim());
        mlp.forward(in.data(), out.data());
        return out;
    };

    SdfQueryResult r;
    const auto o0 = run(dec_coarse, {&enc, &f0});
    const auto o1 = run(dec_mid, {&enc, &f1});
    const auto o2 = run(dec_fine, {&enc, &f1, &f2});
    r.s_coarse = o0[0];
    r.s_hat = o1[0] + o2[0];
    r.z0.assign(o0.begin() + 1, o0.end());
    r.z1.assign(o1.begin() + 1, o1.end());
    r.z2.assign(o2.begin() + 1, o2.end());
    return r;
}

Vec3 SceneModel::query_color(const Vec3& p, const std::vector<double>& z0,
                             const std::vector<double>& z1,
                             const std::vector<double>& z2) const {
    if (!in_bounds(p)) throw ContractViolation("query_color: point outside scene bounds");
    const std::vector<double> enc = encoding.encode(p);
    const std::vector<double> fc = interpolate(color_grid, p);
    std::vector<double> in;
    in.reserve(dec_color.input_dim());
    in.insert(in.end(), enc.begin(), enc.end());
    in.insert(in.end(), z0.begin(), z0.end());
    in.insert(in.end(), z1.begin(), z1.end());
    in.insert(in.end(), z2.begin(), z2.end());
    in.insert(in.end(), fc.begin(), fc.end());
    Vec3 c;
    dec_color.forward(in.data(), c.data());
    return c;
}

uint64_t SceneModel::geometry_checksum() const {
    return hash_combine(hash_combine(dec_coarse.checksum(), dec_mid.checksum()),
                        dec_fine.checksum());
}

// ---------------------------------------------------------------------------
// tape-side batched queries
// ---------------------------------------------------------------------------

namespace {

NodeId grid_node(Tape& t, const FeatureGrid& g, bool trainable) {
    if (trainable && g.features.trainable)
        return t.leaf(g.features, g.meta.vertex_count(), g.meta.feature_dim);
    return t.constant(g.features.value, g.meta.vertex_count(), g.meta.feature_dim);
}

void mlp_nodes(Tape& t, const Mlp& mlp, bool trainable, std::vector<NodeId>& w,
               std::vector<NodeId>& b) {
    for (size_t l = 0; l < mlp.weights.size(); ++l) {
        const int out = static_cast<int>(mlp.biases[l].value.size());
        const int in = static_cast<int>(mlp.weights[l].value.size()) / out;
        if (trainable && mlp.weights[l].trainable) {
            w.push_back(t.leaf(mlp.weights[l], out, in));
            b.push_back(t.leaf(mlp.biases[l], 1, out));
        } else {
            w.push_back(t.constant(mlp.weights[l].value, out, in));
            b.push_back(t.constant(mlp.biases[l].value, 1, out));
        }
    }
}

NodeId run_mlp(Tape& t, const std::vector<NodeId>& w, const std::vector<NodeId>& b,
               NodeId x, bool sigmoid_output) {
    NodeId h = x;
    for (size_t l = 0; l < w.size(); ++l) {
        h = t.linear(h, w[l], b[l]);
        if (l + 1 < w.size())
            h = t.relu(h);
        else if (sigmoid_output)
            h = t.sigmoid(h);
    }
    return h;
}

/// Primal plus three spatial tangent streams through the MLP. The ReLU mask is
/// detached (its parameter-derivative is zero almost everywhere).
struct Jvp {
    NodeId primal;
    std::array<NodeId, 3> tangent;
};

Jvp run_mlp_jvp(Tape& t, const std::vector<NodeId>& w, const std::vector<NodeId>& b,
                NodeId x, std::array<NodeId, 3> dx) {
    NodeId h = x;
    std::array<NodeId, 3> dh = dx;
    for (size_t l = 0; l < w.size(); ++l) {
        const NodeId z = t.linear(h, w[l], b[l]);
        for (int a = 0; a < 3; ++a) dh[a] = t.linear(dh[a], w[l], -1);
        if (l + 1 < w.size()) {
            std::vector<double> mask(t.val(z).size());
            for (size_t i = 0; i < mask.size(); ++i) mask[i] = t.val(z)[i] > 0 ? 1.0 : 0.0;
            const NodeId mask_c = t.constant(std::move(mask), t.rows(z), t.cols(z));
            h = t.relu(z);
            for (int a = 0; a < 3; ++a) dh[a] = t.mul(dh[a], mask_c);
        } else {
            h = z;
        }
    }
    return {h, dh};
}

}  // namespace

SceneLeaves make_scene_leaves(Tape& t, const SceneModel& m, const TrainSet& train) {
    SceneLeaves lv;
    lv.coarse_grid = grid_node(t, m.coarse, train.coarse_grid);
    lv.mid_grid = grid_node(t, m.mid, train.mid_grid);
    lv.fine_grid = grid_node(t, m.fine, train.fine_grid);
    lv.color_grid = grid_node(t, m.color_grid, train.color_grid);
    lv.beta = (train.beta && m.beta.trainable) ? t.leaf(m.beta, 1, 1)
                                               : t.constant(m.beta.value, 1, 1);
    mlp_nodes(t, m.dec_coarse, train.geometry_decoders, lv.geo_w[0], lv.geo_b[0]);
    mlp_nodes(t, m.dec_mid, train.geometry_decoders, lv.geo_w[1], lv.geo_b[1]);
    mlp_nodes(t, m.dec_fine, train.geometry_decoders, lv.geo_w[2], lv.geo_b[2]);
    mlp_nodes(t, m.dec_color, train.color_decoder, lv.color_w, lv.color_b);
    lv.enc_freq = t.constant(m.encoding.frequencies, m.encoding.num_frequencies, 3);
    return lv;
}

NodeId batch_encode(Tape& t, const SceneModel& m, const SceneLeaves& lv, NodeId points) {
    NodeId u = t.linear(points, lv.enc_freq, -1);  // [N x m]
    return t.concat_cols({t.sin_(u), t.cos_(u), points});
}

SdfBatch batch_query_sdf(Tape& t, const SceneModel& m, const SceneLeaves& lv,
                         NodeId points, bool need_coarse) {
    const int zdim = m.config.geo_feature_dim;
    const NodeId enc = batch_encode(t, m, lv, points);
    const NodeId f1 = t.trilerp(lv.mid_grid, points, m.mid.meta);
    const NodeId f2 = t.trilerp(lv.fine_grid, points, m.fine.meta);

    SdfBatch out;
    const NodeId mid_out = run_mlp(t, lv.geo_w[1], lv.geo_b[1], t.concat_cols({enc, f1}), false);
    const NodeId fine_out =
        run_mlp(t, lv.geo_w[2], lv.geo_b[2], t.concat_cols({enc, f1, f2}), false);
    out.s_hat = t.add(t.slice_cols(mid_out, 0, 1), t.slice_cols(fine_out, 0, 1));
    out.z1 = t.slice_cols(mid_out, 1, 1 + zdim);
    out.z2 = t.slice_cols(fine_out, 1, 1 + zdim);
    if (need_coarse) {
        const NodeId f0 = t.trilerp(lv.coarse_grid, points, m.coarse.meta);
        const NodeId coarse_out =
            run_mlp(t, lv.geo_w[0], lv.geo_b[0], t.concat_cols({enc, f0}), false);
        out.s_coarse = t.slice_cols(coarse_out, 0, 1);
        out.z0 = t.slice_cols(coarse_out, 1, 1 + zdim);
    }
    return out;
}

NodeId batch_query_color(Tape& t, const SceneModel& m, const SceneLeaves& lv,
                         NodeId points, const SdfBatch& geo) {
    const NodeId enc = batch_encode(t, m, lv, points);
    const NodeId fc = t.trilerp(lv.color_grid, points, m.color_grid.meta);
    const NodeId in = t.concat_cols({enc, geo.z0, geo.z1, geo.z2, fc});
    return run_mlp(t, lv.color_w, lv.color_b, in, true);
}

NodeId batch_sdf_spatial_gradient(Tape& t, const SceneModel& m, const SceneLeaves& lv,
                                  NodeId points) {
    if (t.needs_grad(points))
        throw ContractViolation("batch_sdf_spatial_gradient: points must be constant");
    const int N = t.rows(points);
    const int mfreq = m.encoding.num_frequencies;

    // Encoding primal and tangents: d/dp_a [sin(Fp); cos(Fp); p].
    const NodeId u = t.linear(points, lv.enc_freq, -1);
    const NodeId su = t.sin_(u), cu = t.cos_(u);
    const NodeId enc = t.concat_cols({su, cu, points});
    std::array<NodeId, 3> denc;
    for (int a = 0; a < 3; ++a) {
        std::vector<double> freq_col(static_cast<size_t>(N) * mfreq);
        for (int i = 0; i < N; ++i)
            for (int k = 0; k < mfreq; ++k)
                freq_col[static_cast<size_t>(i) * mfreq + k] = m.encoding.frequencies[3 * k + a];
        const NodeId fc = t.constant(std::move(freq_col), N, mfreq);
        std::vector<double> unit(static_cast<size_t>(N) * 3, 0.0);
        for (int i = 0; i < N; ++i) unit[3 * i + a] = 1.0;
        denc[a] = t.concat_cols({t.mul(cu, fc), t.neg(t.mul(su, fc)),
                                 t.constant(std::move(unit), N, 3)});
    }

    const NodeId f1 = t.trilerp(lv.mid_grid, points, m.mid.meta);
    const NodeId f2 = t.trilerp(lv.fine_grid, points, m.fine.meta);
    std::array<NodeId, 3> df1, df2;
    for (int a = 0; a < 3; ++a) {
        df1[a] = t.trilerp_dx(lv.mid_grid, points, m.mid.meta, a);
        df2[a] = t.trilerp_dx(lv.fine_grid, points, m.fine.meta, a);
    }

    std::array<NodeId, 3> dmid_in, dfine_in;
    for (int a = 0; a < 3; ++a) {
        dmid_in[a] = t.concat_cols({denc[a], df1[a]});
        dfine_in[a] = t.concat_cols({denc[a], df1[a], df2[a]});
    }
    const Jvp mid = run_mlp_jvp(t, lv.geo_w[1], lv.geo_b[1], t.concat_cols({enc, f1}),
                                dmid_in);
    const Jvp fine = run_mlp_jvp(t, lv.geo_w[2], lv.geo_b[2],
                                 t.concat_cols({enc, f1, f2}), dfine_in);
    std::vector<NodeId> comps;
    for (int a = 0; a < 3; ++a)
        comps.push_back(t.add(t.slice_cols(mid.tangent[a], 0, 1),
                              t.slice_cols(fine.tangent[a], 0, 1)));
    return t.concat_cols(comps);  // [N x 3]
}

// ---------------------------------------------------------------------------
// pretraining
// ---------------------------------------------------------------------------

namespace {

struct PrimitiveScene {
    std::string name;
    SdfFn occ;
    Aabb domain;
};

std::vector<PrimitiveScene> pretrain_scenes() {
    const Aabb dom{Vec3(-1.6, -1.6, -1.6), Vec3(1.6, 1.6, 1.6)};
    std::vector<PrimitiveScene> scenes;
    scenes.push_back({"sphere",
                      [](const Vec3& p) { return occ_sphere(p, Vec3::Zero(), 1.0); }, dom});
    scenes.push_back({"box",
                      [](const Vec3& p) {
                          return occ_box(p, Vec3::Zero(), Vec3(0.8, 0.6, 0.7));
                      },
                      dom});
    scenes.push_back({"room_shell",
                      [](const Vec3& p) {
                          return occ_union(
                              occ_room_shell(p, Vec3::Zero(), Vec3(1.2, 1.2, 1.2)),
                              occ_box(p, Vec3(0.3, -0.6, 0.2), Vec3(0.3, 0.6, 0.3)));
                      },
                      dom});
    return scenes;
}

Vec3 sample_domain(const Aabb& d, Rng& rng) {
    return {rng.uniform(d.lo.x(), d.hi.x()), rng.uniform(d.lo.y(), d.hi.y()),
            rng.uniform(d.lo.z(), d.hi.z())};
}

}  // namespace

PretrainReport pretrain_decoders(SceneModel& model, const PretrainConfig& cfg) {
    const auto scenes = pretrain_scenes();
    Rng rng(cfg.seed);

    struct Scratch {
        FeatureGrid coarse, mid, fine;
    };
    std::vector<Scratch> scratch;
    for (size_t i = 0; i < scenes.size(); ++i) {
        Scratch s;
        const std::string tag = "pretrain." + scenes[i].name;
        s.coarse = FeatureGrid::create(tag + ".coarse", ParamRole::GridFeature,
                                       scenes[i].domain, model.config.coarse_voxel,
                                       model.config.feature_dim);
        s.mid = FeatureGrid::create(tag + ".mid", ParamRole::GridFeature, scenes[i].domain,
                                    model.config.mid_voxel, model.config.feature_dim);
        s.fine = FeatureGrid::create(tag + ".fine", ParamRole::GridFeature,
                                     scenes[i].domain, model.config.fine_voxel,
                                     model.config.feature_dim);
        for (auto* g : {&s.coarse, &s.mid, &s.fine})
            for (auto& v : g->features.value) v = 0.01 * rng.normal();
        scratch.push_back(std::move(s));
    }

    model.dec_coarse.set_trainable(true);
    model.dec_mid.set_trainable(true);
    model.dec_fine.set_trainable(true);

    Adam opt;
    auto collect_params = [&](std::vector<Parameter*>& out, Scratch& s) {
        out.push_back(&s.coarse.features);
        out.push_back(&s.mid.features);
        out.push_back(&s.fine.features);
        for (auto* mlp : {&model.dec_coarse, &model.dec_mid, &model.dec_fine}) {
            for (auto& w : mlp->weights) out.push_back(&w);
            for (auto& b : mlp->biases) out.push_back(&b);
        }
    };

    auto sample_batch = [&](const PrimitiveScene& sc, int n, Rng& r,
                            std::vector<double>& pts, std::vector<double>& tgt) {
        pts.clear();
        tgt.clear();
        int kept = 0;
        while (kept < n) {
            Vec3 p = sample_domain(sc.domain, r);
            const double s = sc.occ(p);
            // Oversample the near-surface band.
            if (kept < n / 2 && std::abs(s) > 0.3) continue;
            pts.insert(pts.end(), {p.x(), p.y(), p.z()});
            tgt.push_back(std::clamp(s, -1.0, 1.0));
            ++kept;
        }
    };

    for (int step = 0; step < cfg.steps; ++step) {
        const size_t si = step % scenes.size();
        const PrimitiveScene& sc = scenes[si];
        Scratch& s = scratch[si];

        std::vector<double> pts, tgt;
        sample_batch(sc, cfg.batch, rng, pts, tgt);
        const int N = cfg.batch;

        Tape t;
        // Leaves: scratch grids + decoders, scene box replaced by the domain.
        SceneLeaves lv;
        lv.coarse_grid = t.leaf(s.coarse.features, s.coarse.meta.vertex_count(),
                                s.coarse.meta.feature_dim);
        lv.mid_grid = t.leaf(s.mid.features, s.mid.meta.vertex_count(),
                             s.mid.meta.feature_dim);
        lv.fine_grid = t.leaf(s.fine.features, s.fine.meta.vertex_count(),
                              s.fine.meta.feature_dim);
        mlp_nodes(t, model.dec_coarse, true, lv.geo_w[0], lv.geo_b[0]);
        mlp_nodes(t, model.dec_mid, true, lv.geo_w[1], lv.geo_b[1]);
        mlp_nodes(t, model.dec_fine, true, lv.geo_w[2], lv.geo_b[2]);
        lv.enc_freq = t.constant(model.encoding.frequencies,
                                 model.encoding.num_frequencies, 3);

        const NodeId P = t.constant(pts, N, 3);
        const NodeId enc = batch_encode(t, model, lv, P);
        const NodeId f0 = t.trilerp(lv.coarse_grid, P, s.coarse.meta);
        const NodeId f1 = t.trilerp(lv.mid_grid, P, s.mid.meta);
        const NodeId f2 = t.trilerp(lv.fine_grid, P, s.fine.meta);
        const NodeId s0 =
            t.slice_cols(run_mlp(t, lv.geo_w[0], lv.geo_b[0], t.concat_cols({enc, f0}), false), 0, 1);
        const NodeId s1 =
            t.slice_cols(run_mlp(t, lv.geo_w[1], lv.geo_b[1], t.concat_cols({enc, f1}), false), 0, 1);
        const NodeId s2 = t.slice_cols(
            run_mlp(t, lv.geo_w[2], lv.geo_b[2], t.concat_cols({enc, f1, f2}), false), 0, 1);
        const NodeId shat = t.add(s1, s2);
        const NodeId target = t.constant(tgt, N, 1);

        NodeId loss = t.add(t.mean_all(t.square(t.sub(s0, target))),
                            t.mean_all(t.square(t.sub(shat, target))));

        // Zero-feature anchor: with empty grids the field should read as
        // slightly free space so cold-start rays are not fully transparent.
        {
            const int zf = model.config.feature_dim;
            const NodeId zeros1 = t.constant(std::vector<double>(N * zf, 0.0), N, zf);
            const NodeId zeros2 =
                t.constant(std::vector<double>(N * 2 * zf, 0.0), N, 2 * zf);
            const NodeId a1 = t.slice_cols(
                run_mlp(t, lv.geo_w[1], lv.geo_b[1], t.concat_cols({enc, zeros1}), false), 0, 1);
            const NodeId a2 = t.slice_cols(
                run_mlp(t, lv.geo_w[2], lv.geo_b[2], t.concat_cols({enc, zeros2}), false), 0, 1);
            const NodeId a0 = t.slice_cols(
                run_mlp(t, lv.geo_w[0], lv.geo_b[0], t.concat_cols({enc, zeros1}), false), 0, 1);
            const NodeId anchor = t.add(
                t.mean_all(t.square(t.affine(t.add(a1, a2), 1.0, -cfg.empty_space_sdf))),
                t.mean_all(t.square(t.affine(a0, 1.0, -cfg.empty_space_sdf))));
            loss = t.add(loss, t.affine(anchor, cfg.anchor_weight, 0.0));
        }

        auto grads = t.backward(loss);
        std::vector<Parameter*> params;
        collect_params(params, s);
        for (auto* p : params) p->zero_grad();
        accumulate_gradients(grads);
        for (auto* p : params) {
            const bool is_grid = p->role == ParamRole::GridFeature;
            opt.step(*p, is_grid ? cfg.grid_lr : cfg.decoder_lr);
        }
    }

    // Held-out evaluation on the near-surface band, per scene.
    PretrainReport report;
    double total = 0;
    int count = 0;
    Rng hold(cfg.seed ^ 0xabcdef);
    for (size_t si = 0; si < scenes.size(); ++si) {
        const PrimitiveScene& sc = scenes[si];
        Scratch& s = scratch[si];
        double err = 0;
        int n = 0;
        while (n < cfg.holdout) {
            const Vec3 p = sample_domain(sc.domain, hold);
            const double tgt = sc.occ(p);
            if (std::abs(tgt) > 0.5) continue;
            Tape t;
            SceneLeaves lv;
            lv.mid_grid = t.constant(s.mid.features.value, s.mid.meta.vertex_count(),
                                     s.mid.meta.feature_dim);
            lv.fine_grid = t.constant(s.fine.features.value, s.fine.meta.vertex_count(),
                                      s.fine.meta.feature_dim);
            mlp_nodes(t, model.dec_mid, false, lv.geo_w[1], lv.geo_b[1]);
            mlp_nodes(t, model.dec_fine, false, lv.geo_w[2], lv.geo_b[2]);
            lv.enc_freq = t.constant(model.encoding.frequencies,
                                     model.encoding.num_frequencies, 3);
            const NodeId P = t.constant({p.x(), p.y(), p.z()}, 1, 3);
            const NodeId enc = batch_encode(t, model, lv, P);
            const NodeId f1 = t.trilerp(lv.mid_grid, P, s.mid.meta);
            const NodeId f2 = t.trilerp(lv.fine_grid, P, s.fine.meta);
            const NodeId s1 = t.slice_cols(
                run_mlp(t, lv.geo_w[1], lv.geo_b[1], t.concat_cols({enc, f1}), false), 0, 1);
            const NodeId s2 = t.slice_cols(
                run_mlp(t, lv.geo_w[2], lv.geo_b[2], t.concat_cols({enc, f1, f2}), false), 0, 1);
            err += std::abs(t.val(s1)[0] + t.val(s2)[0] - tgt);
            ++n;
        }
        report.per_scene_err.push_back(err / n);
        total += err;
        count += n;
    }
    report.holdout_mean_abs_err = total / count;
    report.reached_target = report.holdout_mean_abs_err < cfg.target_mean_abs_err;

    model.dec_coarse.set_trainable(false);
    model.dec_mid.set_trainable(false);
    model.dec_fine.set_trainable(false);
    return report;
}

// ---------------------------------------------------------------------------
// checkpoint archive
// ---------------------------------------------------------------------------

namespace {

constexpr uint32_t kMagic = 0x4d4c534e;  // "NSLM"
constexpr uint32_t kVersion = 1;

struct Writer {
    std::ofstream f;
    explicit Writer(const std::string& path) : f(path, std::ios::binary) {
        if (!f) throw IoError("cannot open checkpoint for writing: " + path);
    }
    void u32(uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); }
    void u64(uint64_t v) { f.write(reinterpret_cast<const char*>(&v), 8); }
    void f64(double v) { f.write(reinterpret_cast<const char*>(&v), 8); }
    void vec(const std::vector<double>& v) {
        u64(v.size());
        f.write(reinterpret_cast<const char*>(v.data()), 8 * v.size());
    }
};

struct Reader {
    std::ifstream f;
    explicit Reader(const std::string& path) : f(path, std::ios::binary) {
        if (!f) throw IoError("cannot open checkpoint: " + path);
    }
    uint32_t u32() {
        uint32_t v;
        f.read(reinterpret_cast<char*>(&v), 4);
        if (!f) throw IoError("checkpoint truncated");
        return v;
    }
    uint64_t u64() {
        uint64_t v;
        f.read(reinterpret_cast<char*>(&v), 8);
        if (!f) throw IoError("checkpoint truncated");
        return v;
    }
    double f64() {
        double v;
        f.read(reinterpret_cast<char*>(&v), 8);
        if (!f) throw IoError("checkpoint truncated");
        return v;
    }
    std::vector<double> vec() {
        const uint64_t n = u64();
        if (n > (1ull << 32)) throw IoError("checkpoint corrupt: oversized block");
        std::vector<double> v(n);
        f.read(reinterpret_cast<char*>(v.data()), 8 * n);
        if (!f) throw IoError("checkpoint truncated");
        return v;
    }
};

void write_mlp(Writer& w, const Mlp& mlp) {
    w.u32(static_cast<uint32_t>(mlp.weights.size()));
    w.u32(mlp.sigmoid_output ? 1 : 0);
    for (size_t l = 0; l < mlp.weights.size(); ++l) {
        w.u32(static_cast<uint32_t>(mlp.biases[l].value.size()));
        w.vec(mlp.weights[l].value);
        w.vec(mlp.biases[l].value);
    }
}

void read_mlp(Reader& r, Mlp& mlp) {
    const uint32_t layers = r.u32();
    if (layers != mlp.weights.size()) throw IoError("checkpoint: decoder layout mismatch");
    mlp.sigmoid_output = r.u32() != 0;
    for (uint32_t l = 0; l < layers; ++l) {
        (void)r.u32();
        mlp.weights[l].value = r.vec();
        mlp.biases[l].value = r.vec();
    }
}

void write_grid(Writer& w, const FeatureGrid& g) {
    w.f64(g.meta.origin.x());
    w.f64(g.meta.origin.y());
    w.f64(g.meta.origin.z());
    w.f64(g.meta.voxel);
    w.u32(g.meta.nx);
    w.u32(g.meta.ny);
    w.u32(g.meta.nz);
    w.u32(g.meta.feature_dim);
    w.vec(g.features.value);
}

void read_grid(Reader& r, FeatureGrid& g) {
    g.meta.origin = Vec3(r.f64(), r.f64(), r.f64());
    g.meta.voxel = r.f64();
    g.meta.nx = static_cast<int>(r.u32());
    g.meta.ny = static_cast<int>(r.u32());
    g.meta.nz = static_cast<int>(r.u32());
    g.meta.feature_dim = static_cast<int>(r.u32());
    g.features.value = r.vec();
    if (g.features.value.size() !=
        static_cast<size_t>(g.meta.vertex_count()) * g.meta.feature_dim)
        throw IoError("checkpoint: grid size mismatch");
}

}  // namespace

void SceneModel::save(const std::string& path) const {
    Writer w(path);
    w.u32(kMagic);
    w.u32(kVersion);
    for (int a = 0; a < 3; ++a) w.f64(config.bounds.lo[a]);
    for (int a = 0; a < 3; ++a) w.f64(config.bounds.hi[a]);
    w.f64(config.coarse_voxel);
    w.f64(config.mid_voxel);
    w.f64(config.fine_voxel);
    w.f64(config.color_voxel);
    w.u32(config.feature_dim);
    w.u32(config.geo_feature_dim);
    w.u32(config.hidden_dim);
    w.u32(config.geo_layers);
    w.u32(config.color_layers);
    w.u32(config.encoding.num_frequencies);
    w.f64(config.encoding.scale);
    w.u64(config.encoding.seed);
    w.f64(config.beta_init);
    w.f64(config.beta_floor);
    w.u64(config.weight_seed);
    w.vec(encoding.frequencies);
    write_grid(w, coarse);
    write_grid(w, mid);
    write_grid(w, fine);
    write_grid(w, color_grid);
    write_mlp(w, dec_coarse);
    write_mlp(w, dec_mid);
    write_mlp(w, dec_fine);
    write_mlp(w, dec_color);
    w.f64(beta.value[0]);
    if (!w.f) throw IoError("checkpoint write failed: " + path);
}

SceneModel SceneModel::load(const std::string& path) {
    Reader r(path);
    if (r.u32() != kMagic) throw IoError("not a scene checkpoint: " + path);
    if (r.u32() != kVersion) throw IoError("unsupported checkpoint version");
    SceneConfig cfg;
    for (int a = 0; a < 3; ++a) cfg.bounds.lo[a] = r.f64();
    for (int a = 0; a < 3; ++a) cfg.bounds.hi[a] = r.f64();
    cfg.coarse_voxel = r.f64();
    cfg.mid_voxel = r.f64();
    cfg.fine_voxel = r.f64();
    cfg.color_voxel = r.f64();
    cfg.feature_dim = static_cast<int>(r.u32());
    cfg.geo_feature_dim = static_cast<int>(r.u32());
    cfg.hidden_dim = static_cast<int>(r.u32());
    cfg.geo_layers = static_cast<int>(r.u32());
    cfg.color_layers = static_cast<int>(r.u32());
    cfg.encoding.num_frequencies = static_cast<int>(r.u32());
    cfg.encoding.scale = r.f64();
    cfg.encoding.seed = r.u64();
    cfg.beta_init = r.f64();
    cfg.beta_floor = r.f64();
    cfg.weight_seed = r.u64();

    SceneModel m = SceneModel::create(cfg);
    m.encoding.frequencies = r.vec();
    read_grid(r, m.coarse);
    read_grid(r, m.mid);
    read_grid(r, m.fine);
    read_grid(r, m.color_grid);
    read_mlp(r, m.dec_coarse);
    read_mlp(r, m.dec_mid);
    read_mlp(r, m.dec_fine);
    read_mlp(r, m.dec_color);
    m.beta.value[0] = r.f64();
    m.dec_coarse.set_trainable(false);
    m.dec_mid.set_trainable(false);
    m.dec_fine.set_trainable(false);
    return m;
}

}  // namespace neslam
