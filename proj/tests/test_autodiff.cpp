#include <catch2/catch_amalgamated.hpp>

#include "neslam/rng.hpp"
#include "neslam/tape.hpp"

#include <cmath>

using namespace neslam;

namespace {

std::vector<double> random_vec(size_t n, Rng& rng, double lo = -1, double hi = 1) {
    std::vector<double> v(n);
    for (auto& x : v) x = rng.uniform(lo, hi);
    return v;
}

Parameter make_param(const std::string& name, size_t n, Rng& rng, double lo = -1,
                     double hi = 1) {
    return Parameter(name, ParamRole::DecoderWeight, random_vec(n, rng, lo, hi));
}

}  // namespace

TEST_CASE("d/dx x^2 = 2x") {
    Parameter x("x", ParamRole::DecoderWeight, {3.0});
    Tape t;
    NodeId loss = t.square(t.leaf(x, 1, 1));
    auto g = t.backward(loss);
    REQUIRE(g.count(&x) == 1);
    CHECK(g[&x][0] == Catch::Approx(6.0));
}

TEST_CASE("constants receive no gradient") {
    Parameter x("x", ParamRole::DecoderWeight, {3.0});
    Tape t;
    NodeId c = t.constant_scalar(5.0);
    NodeId loss = t.mul(c, t.constant_scalar(2.0));
    auto g = t.backward(loss);
    CHECK(g.empty());
    // A leaf not connected to the loss gets no entry either.
    (void)t.leaf(x, 1, 1);
    auto g2 = t.backward(loss);
    CHECK(g2.count(&x) == 0);
}

TEST_CASE("non-scalar backward seed is rejected") {
    Tape t;
    NodeId v = t.constant({1, 2, 3}, 3, 1);
    CHECK_THROWS_AS(t.backward(v), ContractViolation);
}

TEST_CASE("backward twice yields identical gradients") {
    Rng rng(2);
    Parameter a = make_param("a", 12, rng);
    Parameter b = make_param("b", 12, rng);
    Tape t;
    NodeId loss = t.sum_all(t.mul(t.sin_(t.leaf(a, 3, 4)), t.exp_(t.leaf(b, 3, 4))));
    auto g1 = t.backward(loss);
    auto g2 = t.backward(loss);
    REQUIRE(g1.size() == g2.size());
    for (auto& [p, v] : g1) {
        REQUIRE(g2.count(p) == 1);
        for (size_t i = 0; i < v.size(); ++i) REQUIRE(v[i] == g2[p][i]);
    }
}

TEST_CASE("gradient of sum equals sum of gradients") {
    Rng rng(5);
    for (int trial = 0; trial < 5; ++trial) {
        Parameter a = make_param("a", 8, rng);
        auto grad_of = [&](auto&& build) {
            Tape t;
            NodeId loss = build(t);
            return t.backward(loss)[&a];
        };
        auto f1 = [&](Tape& t) { return t.sum_all(t.square(t.leaf(a, 2, 4))); };
        auto f2 = [&](Tape& t) { return t.sum_all(t.sin_(t.leaf(a, 2, 4))); };
        auto fsum = [&](Tape& t) {
            return t.add(t.sum_all(t.square(t.leaf(a, 2, 4))),
                         t.sum_all(t.sin_(t.leaf(a, 2, 4))));
        };
        auto g1 = grad_of(f1), g2 = grad_of(f2), gs = grad_of(fsum);
        for (size_t i = 0; i < g1.size(); ++i)
            REQUIRE(gs[i] == Catch::Approx(g1[i] + g2[i]).margin(1e-14));
    }
}

TEST_CASE("finite_diff_check on quadratic form is exact to 1e-8") {
    Rng rng(3);
    Parameter x = make_param("x", 6, rng);
    const std::vector<double> q = random_vec(36, rng);
    auto fn = [&](GradientMap* g) {
        Tape t;
        NodeId xs = t.leaf(x, 1, 6);
        NodeId Q = t.constant(q, 6, 6);
        NodeId y = t.linear(xs, Q, -1);  // x Q^T
        NodeId loss = t.sum_all(t.mul(y, xs));
        double v = t.scalar(loss);
        if (g) *g = t.backward(loss);
        return v;
    };
    auto rep = finite_diff_check(fn, {&x}, 1e-5);
    CHECK(rep.max_rel_err < 1e-8);
}

namespace {

/// FD-checks a scalar function of a few parameter blocks built with a tape.
double check_op(const std::function<NodeId(Tape&, std::vector<Parameter*>&)>& build,
                std::vector<Parameter*> params, double step = 1e-5) {
    auto fn = [&](GradientMap* g) {
        Tape t;
        NodeId loss = build(t, params);
        double v = t.scalar(loss);
        if (g) *g = t.backward(loss);
        return v;
    };
    return finite_diff_check(fn, params, step).max_rel_err;
}

}  // namespace

TEST_CASE("elementwise primitives match finite differences") {
    Rng rng(17);
    Parameter a = make_param("a", 12, rng, 0.2, 1.5);
    Parameter b = make_param("b", 12, rng, 0.2, 1.5);

    auto unary = [&](auto op) {
        return check_op(
            [&](Tape& t, std::vector<Parameter*>& ps) {
                NodeId x = t.leaf(*ps[0], 3, 4);
                return t.sum_all(op(t, x));
            },
            {&a});
    };
    CHECK(unary([](Tape& t, NodeId x) { return t.exp_(x); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.log_(x); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.sqrt_(x); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.sin_(x); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.cos_(x); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.square(x); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.relu(x); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.softplus(x); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.sigmoid(x); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.reciprocal(x); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.abs_(x); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.affine(x, 2.5, -0.75); }) < 1e-7);
    CHECK(unary([](Tape& t, NodeId x) { return t.clamp_min(x, 0.5); }) < 1e-5);

    const double binerr = check_op(
        [&](Tape& t, std::vector<Parameter*>& ps) {
            NodeId x = t.leaf(*ps[0], 3, 4);
            NodeId y = t.leaf(*ps[1], 3, 4);
            return t.sum_all(t.mul(t.add(x, y), t.sub(x, y)));
        },
        {&a, &b});
    CHECK(binerr < 1e-7);
}

TEST_CASE("broadcast and reduction primitives match finite differences") {
    Rng rng(19);
    Parameter x = make_param("x", 15, rng);
    Parameter v = make_param("v", 5, rng);
    Parameter s = make_param("s", 1, rng, 0.5, 1.5);

    const double err = check_op(
        [&](Tape& t, std::vector<Parameter*>& ps) {
            NodeId X = t.leaf(*ps[0], 5, 3);
            NodeId V = t.leaf(*ps[1], 5, 1);
            NodeId S = t.leaf(*ps[2], 1, 1);
            NodeId y = t.mul_colvec(t.add_colvec(X, V), V);
            y = t.mul_scalar(t.sub_colvec(y, V), S);
            return t.add(t.mean_all(y), t.sum_all(t.rowsum(y)));
        },
        {&x, &v, &s});
    CHECK(err < 1e-7);
}

TEST_CASE("shape primitives match finite differences") {
    Rng rng(23);
    Parameter x = make_param("x", 24, rng);
    const double err = check_op(
        [&](Tape& t, std::vector<Parameter*>& ps) {
            NodeId X = t.leaf(*ps[0], 4, 6);
            NodeId r = t.reshape(X, 6, 4);
            NodeId sl = t.slice_cols(X, 1, 4);
            NodeId cc = t.concat_cols({sl, sl});
            NodeId gr = t.gather_rows(X, {3, 0, 0, 2});
            return t.add(t.sum_all(t.square(r)),
                         t.add(t.sum_all(t.mul(cc, cc)), t.sum_all(t.sin_(gr))));
        },
        {&x});
    CHECK(err < 1e-7);
}

TEST_CASE("linear layer matches finite differences") {
    Rng rng(29);
    Parameter x = make_param("x", 4 * 7, rng);
    Parameter w = make_param("w", 5 * 7, rng);
    Parameter b = make_param("b", 5, rng);
    const double err = check_op(
        [&](Tape& t, std::vector<Parameter*>& ps) {
            NodeId X = t.leaf(*ps[0], 4, 7);
            NodeId W = t.leaf(*ps[1], 5, 7);
            NodeId B = t.leaf(*ps[2], 1, 5);
            return t.sum_all(t.square(t.linear(X, W, B)));
        },
        {&x, &w, &b});
    CHECK(err < 1e-7);
}

TEST_CASE("conv3x3 and avgpool2 match finite differences") {
    Rng rng(31);
    const int H = 6, W = 8;
    Parameter x = make_param("x", 2 * H * W, rng);
    Parameter w = make_param("w", 3 * 2 * 9, rng);
    Parameter b = make_param("b", 3, rng);
    const double err = check_op(
        [&](Tape& t, std::vector<Parameter*>& ps) {
            NodeId X = t.leaf(*ps[0], 2, H * W);
            NodeId Wn = t.leaf(*ps[1], 3, 2 * 9);
            NodeId B = t.leaf(*ps[2], 1, 3);
            NodeId y = t.conv3x3(X, Wn, B, H, W);
            NodeId p = t.avgpool2(t.relu(y), H, W);
            return t.sum_all(t.square(p));
        },
        {&x, &w, &b});
    CHECK(err < 1e-6);
}

TEST_CASE("softmax and cross entropy match finite differences") {
    Rng rng(37);
    Parameter x = make_param("x", 4 * 9, rng);
    const double err = check_op(
        [&](Tape& t, std::vector<Parameter*>& ps) {
            NodeId X = t.leaf(*ps[0], 4, 9);
            NodeId sm = t.softmax_rows(X);
            NodeId ce = t.cross_entropy_rows(X, {0, 3, 8, 2}, {1, 1, 0, 1});
            return t.add(t.sum_all(t.square(sm)), t.sum_all(ce));
        },
        {&x});
    CHECK(err < 1e-6);
}

TEST_CASE("softmax rows sum to one") {
    Rng rng(41);
    Parameter x = make_param("x", 6 * 65, rng, -4, 4);
    Tape t;
    NodeId sm = t.softmax_rows(t.leaf(x, 6, 65));
    for (int r = 0; r < 6; ++r) {
        double acc = 0;
        for (int c = 0; c < 65; ++c) acc += t.val(sm)[r * 65 + c];
        REQUIRE(acc == Catch::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("sdf_to_density gradients away from the crossing") {
    Rng rng(43);
    Parameter s("s", ParamRole::GridFeature, {-0.5, -0.2, 0.1, 0.4, 0.8, -0.05});
    Parameter beta("beta", ParamRole::Beta, {0.1});
    const double err = check_op(
        [&](Tape& t, std::vector<Parameter*>& ps) {
            NodeId S = t.leaf(*ps[0], 1, 6);
            NodeId B = t.leaf(*ps[1], 1, 1);
            return t.sum_all(t.square(t.sdf_to_density(S, B)));
        },
        {&s, &beta}, 1e-6);
    CHECK(err < 1e-4);
}

TEST_CASE("cumsum_exclusive matches finite differences and definition") {
    Rng rng(47);
    Parameter x = make_param("x", 3 * 5, rng);
    Tape t;
    NodeId X = t.leaf(x, 3, 5);
    NodeId cs = t.cumsum_exclusive_rows(X);
    for (int r = 0; r < 3; ++r) {
        double acc = 0;
        for (int c = 0; c < 5; ++c) {
            REQUIRE(t.val(cs)[r * 5 + c] == Catch::Approx(acc).margin(1e-15));
            acc += x.value[r * 5 + c];
        }
    }
    const double err = check_op(
        [&](Tape& tp, std::vector<Parameter*>& ps) {
            NodeId Xn = tp.leaf(*ps[0], 3, 5);
            return tp.sum_all(tp.square(tp.cumsum_exclusive_rows(Xn)));
        },
        {&x});
    CHECK(err < 1e-7);
}

TEST_CASE("se3_transform all kinds match finite differences") {
    Rng rng(53);
    std::vector<double> pts = random_vec(5 * 3, rng, -2, 2);
    const std::vector<double> proj = random_vec(5 * 3, rng);
    for (auto kind : {Tape::Se3Kind::Point, Tape::Se3Kind::Vector,
                      Tape::Se3Kind::InversePoint}) {
        // Check at a nonzero tangent so the full Jacobian (not just the
        // identity linearization) is exercised.
        Parameter delta("delta", ParamRole::PoseTangent,
                        {0.05, -0.1, 0.07, 0.2, -0.3, 0.15});
        const double err = check_op(
            [&](Tape& t, std::vector<Parameter*>& ps) {
                NodeId d = t.leaf(*ps[0], 1, 6);
                NodeId y = t.se3_transform(d, pts, kind);
                return t.sum_all(t.mul(y, t.constant(proj, 5, 3)));
            },
            {&delta}, 1e-6);
        REQUIRE(err < 1e-6);
    }
}

TEST_CASE("se3_transform at zero delta is identity") {
    Parameter delta("delta", ParamRole::PoseTangent, std::vector<double>(6, 0.0));
    std::vector<double> pts = {1, 2, 3, -1, 0.5, 2};
    Tape t;
    NodeId y = t.se3_transform(t.leaf(delta, 1, 6), pts, Tape::Se3Kind::Point);
    for (size_t i = 0; i < pts.size(); ++i) REQUIRE(t.val(y)[i] == Catch::Approx(pts[i]));
}

TEST_CASE("ray_points matches finite differences") {
    Rng rng(59);
    Parameter origin = make_param("o", 3, rng);
    Parameter dirs = make_param("d", 4 * 3, rng);
    std::vector<double> ts = random_vec(4 * 6, rng, 0.1, 5.0);
    const double err = check_op(
        [&](Tape& t, std::vector<Parameter*>& ps) {
            NodeId o = t.leaf(*ps[0], 1, 3);
            NodeId d = t.leaf(*ps[1], 4, 3);
            NodeId y = t.ray_points(o, d, ts, 4, 6);
            return t.sum_all(t.square(y));
        },
        {&origin, &dirs});
    CHECK(err < 1e-7);
}

namespace {

GridMeta small_grid(int F) {
    GridMeta m;
    m.origin = Vec3(-1, -1, -1);
    m.voxel = 0.5;
    m.nx = m.ny = m.nz = 5;
    m.feature_dim = F;
    return m;
}

}  // namespace

TEST_CASE("trilerp matches the 8-term weighted sum oracle") {
    Rng rng(61);
    const GridMeta meta = small_grid(4);
    Parameter grid = make_param("grid", meta.vertex_count() * 4, rng);
    for (int trial = 0; trial < 50; ++trial) {
        const Vec3 p(rng.uniform(-0.99, 0.99), rng.uniform(-0.99, 0.99),
                     rng.uniform(-0.99, 0.99));
        Tape t;
        NodeId g = t.leaf(grid, meta.vertex_count(), 4);
        NodeId pts = t.constant({p.x(), p.y(), p.z()}, 1, 3);
        NodeId out = t.trilerp(g, pts, meta);

        // Independent oracle: explicit 8-corner weighted sum.
        const Vec3 u = (p - meta.origin) / meta.voxel;
        const int ix = static_cast<int>(std::floor(u.x()));
        const int iy = static_cast<int>(std::floor(u.y()));
        const int iz = static_cast<int>(std::floor(u.z()));
        const double fx = u.x() - ix, fy = u.y() - iy, fz = u.z() - iz;
        for (int k = 0; k < 4; ++k) {
            double expected = 0, wsum = 0;
            for (int dx = 0; dx < 2; ++dx)
                for (int dy = 0; dy < 2; ++dy)
                    for (int dz = 0; dz < 2; ++dz) {
                        const double w = (dx ? fx : 1 - fx) * (dy ? fy : 1 - fy) *
                                         (dz ? fz : 1 - fz);
                        wsum += w;
                        expected +=
                            w * grid.value[meta.vertex_index(ix + dx, iy + dy, iz + dz) * 4 + k];
                    }
            REQUIRE(wsum == Catch::Approx(1.0).epsilon(1e-12));
            REQUIRE(t.val(out)[k] == Catch::Approx(expected).margin(1e-12));
        }
    }
}

TEST_CASE("trilerp at a vertex returns that vertex feature") {
    Rng rng(67);
    const GridMeta meta = small_grid(3);
    Parameter grid = make_param("grid", meta.vertex_count() * 3, rng);
    Tape t;
    NodeId g = t.leaf(grid, meta.vertex_count(), 3);
    // Vertex (2,1,3) sits at origin + voxel * (2,1,3).
    const Vec3 p = meta.origin + meta.voxel * Vec3(2, 1, 3);
    NodeId out = t.trilerp(g, t.constant({p.x(), p.y(), p.z()}, 1, 3), meta);
    for (int k = 0; k < 3; ++k)
        REQUIRE(t.val(out)[k] ==
                Catch::Approx(grid.value[meta.vertex_index(2, 1, 3) * 3 + k]).margin(1e-12));
}

TEST_CASE("trilerp gradients w.r.t. grid and points match finite differences") {
    Rng rng(71);
    const GridMeta meta = small_grid(2);
    Parameter grid = make_param("grid", meta.vertex_count() * 2, rng);
    // Points stored in a parameter so the FD checker can perturb them; kept
    // strictly inside one cell to stay off the piecewise boundaries.
    Parameter pts("pts", ParamRole::GridFeature,
                  {-0.62, 0.13, 0.38, 0.12, -0.83, 0.62, 0.3, 0.35, -0.4});
    const double err = check_op(
        [&](Tape& t, std::vector<Parameter*>& ps) {
            NodeId g = t.leaf(*ps[0], meta.vertex_count(), 2);
            NodeId p = t.leaf(*ps[1], 3, 3);
            return t.sum_all(t.square(t.trilerp(g, p, meta)));
        },
        {&grid, &pts}, 1e-6);
    CHECK(err < 1e-6);
}

TEST_CASE("trilerp_dx equals finite difference of trilerp in space") {
    Rng rng(73);
    const GridMeta meta = small_grid(3);
    Parameter grid = make_param("grid", meta.vertex_count() * 3, rng);
    const Vec3 p(0.21, -0.33, 0.42);
    const double h = 1e-7;
    for (int axis = 0; axis < 3; ++axis) {
        Tape t;
        NodeId g = t.leaf(grid, meta.vertex_count(), 3);
        NodeId dx =
            t.trilerp_dx(g, t.constant({p.x(), p.y(), p.z()}, 1, 3), meta, axis);
        Vec3 pp = p, pm = p;
        pp[axis] += h;
        pm[axis] -= h;
        NodeId fp = t.trilerp(g, t.constant({pp.x(), pp.y(), pp.z()}, 1, 3), meta);
        NodeId fm = t.trilerp(g, t.constant({pm.x(), pm.y(), pm.z()}, 1, 3), meta);
        for (int k = 0; k < 3; ++k) {
            const double fd = (t.val(fp)[k] - t.val(fm)[k]) / (2 * h);
            REQUIRE(t.val(dx)[k] == Catch::Approx(fd).margin(1e-6));
        }
    }
}

TEST_CASE("trilerp_dx gradient w.r.t. grid matches finite differences") {
    Rng rng(79);
    const GridMeta meta = small_grid(2);
    Parameter grid = make_param("grid", meta.vertex_count() * 2, rng);
    std::vector<double> pts = {0.21, -0.33, 0.42, -0.55, 0.6, -0.1};
    const double err = check_op(
        [&](Tape& t, std::vector<Parameter*>& ps) {
            NodeId g = t.leaf(*ps[0], meta.vertex_count(), 2);
            NodeId p = t.constant(pts, 2, 3);
            NodeId loss = t.constant_scalar(0.0);
            for (int axis = 0; axis < 3; ++axis)
                loss = t.add(loss, t.sum_all(t.square(t.trilerp_dx(g, p, meta, axis))));
            return loss;
        },
        {&grid});
    CHECK(err < 1e-6);
}

TEST_CASE("grid locality: perturbing one vertex only affects adjacent cells") {
    Rng rng(83);
    const GridMeta meta = small_grid(1);
    Parameter grid = make_param("grid", meta.vertex_count(), rng);
    // Vertex (2,2,2) influences points in cells [1,3) on each axis, i.e. the
    // world window origin + voxel*[1,3].
    const int vidx = meta.vertex_index(2, 2, 2);
    auto query = [&](const Vec3& p) {
        Tape t;
        NodeId out = t.trilerp(t.leaf(grid, meta.vertex_count(), 1),
                               t.constant({p.x(), p.y(), p.z()}, 1, 3), meta);
        return t.val(out)[0];
    };
    const Vec3 inside = meta.origin + meta.voxel * Vec3(2.3, 1.7, 2.5);
    const Vec3 outside = meta.origin + meta.voxel * Vec3(0.4, 0.4, 0.4);
    const double before_in = query(inside), before_out = query(outside);
    grid.value[vidx] += 1.0;
    CHECK(std::abs(query(inside) - before_in) > 1e-6);
    CHECK(query(outside) == Catch::Approx(before_out).margin(1e-15));
}

TEST_CASE("gradients flow through a small MLP chain") {
    Rng rng(89);
    Parameter w1 = make_param("w1", 8 * 5, rng, -0.5, 0.5);
    Parameter b1 = make_param("b1", 8, rng, -0.1, 0.1);
    Parameter w2 = make_param("w2", 1 * 8, rng, -0.5, 0.5);
    const std::vector<double> x = random_vec(4 * 5, rng);
    const double err = check_op(
        [&](Tape& t, std::vector<Parameter*>& ps) {
            NodeId X = t.constant(x, 4, 5);
            NodeId h = t.relu(t.linear(X, t.leaf(*ps[0], 8, 5), t.leaf(*ps[1], 1, 8)));
            NodeId y = t.linear(h, t.leaf(*ps[2], 1, 8), -1);
            return t.mean_all(t.square(y));
        },
        {&w1, &b1, &w2});
    CHECK(err < 1e-6);
}
