#include "neslam/tape.hpp"

#include "neslam/geometry.hpp"
#include "neslam/rng.hpp"

#include <algorithm>
#include <cmath>

namespace neslam {

NodeId Tape::make_node(int rows, int cols, bool needs_grad) {
    Node n;
    n.rows = rows;
    n.cols = cols;
    n.needs_grad = needs_grad;
    n.val.resize(static_cast<size_t>(rows) * cols);
    nodes_.push_back(std::move(n));
    return static_cast<NodeId>(nodes_.size() - 1);
}

std::vector<double>& Tape::grad_buf(NodeId id) {
    Node& n = nodes_[id];
    if (n.grad.size() != n.val.size()) n.grad.assign(n.val.size(), 0.0);
    return n.grad;
}

void Tape::check_same_shape(NodeId a, NodeId b, const char* op) const {
    if (nodes_[a].rows != nodes_[b].rows || nodes_[a].cols != nodes_[b].cols)
        throw ContractViolation(std::string(op) + ": shape mismatch");
}

NodeId Tape::constant(std::vector<double> v, int rows, int cols) {
    if (v.size() != static_cast<size_t>(rows) * cols)
        throw ContractViolation("constant: size does not match shape");
    NodeId id = make_node(rows, cols, false);
    nodes_[id].val = std::move(v);
    return id;
}

NodeId Tape::leaf(const Parameter& p, int rows, int cols) {
    if (p.value.size() != static_cast<size_t>(rows) * cols)
        throw ContractViolation("leaf: parameter size does not match shape: " + p.name);
    NodeId id = make_node(rows, cols, p.trainable);
    nodes_[id].val = p.value;
    if (p.trainable) nodes_[id].param = &p;
    return id;
}

double Tape::scalar(NodeId id) const {
    const Node& n = nodes_[id];
    if (n.val.size() != 1) throw ContractViolation("scalar: node is not 1x1");
    return n.val[0];
}

// ---------------------------------------------------------------------------
// elementwise
// ---------------------------------------------------------------------------

template <typename Fwd, typename Bwd>
NodeId Tape::unary_op(NodeId a, Fwd fwd, Bwd dfdx) {
    const Node& in = nodes_[a];
    NodeId out = make_node(in.rows, in.cols, in.needs_grad);
    const size_t n = in.val.size();
    for (size_t i = 0; i < n; ++i) nodes_[out].val[i] = fwd(in.val[i]);
    if (in.needs_grad) {
        pullbacks_.push_back([this, a, out, dfdx]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            auto& ga = grad_buf(a);
            const auto& x = nodes_[a].val;
            const auto& y = nodes_[out].val;
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * dfdx(x[i], y[i]);
        });
    }
    return out;
}

NodeId Tape::neg(NodeId a) {
    return unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}
NodeId Tape::exp_(NodeId a) {
    return unary_op(a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}
NodeId Tape::log_(NodeId a) {
    return unary_op(a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}
NodeId Tape::sqrt_(NodeId a) {
    return unary_op(a, [](double x) { return std::sqrt(x); },
                    [](double, double y) { return 0.5 / y; });
}
NodeId Tape::sin_(NodeId a) {
    return unary_op(a, [](double x) { return std::sin(x); },
                    [](double x, double) { return std::cos(x); });
}
NodeId Tape::cos_(NodeId a) {
    return unary_op(a, [](double x) { return std::cos(x); },
                    [](double x, double) { return -std::sin(x); });
}
NodeId Tape::square(NodeId a) {
    return unary_op(a, [](double x) { return x * x; },
                    [](double x, double) { return 2.0 * x; });
}
NodeId Tape::abs_(NodeId a) {
    return unary_op(a, [](double x) { return std::abs(x); },
                    [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}
NodeId Tape::relu(NodeId a) {
    return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                    [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
NodeId Tape::softplus(NodeId a) {
    return unary_op(
        a, [](double x) { return x > 30 ? x : std::log1p(std::exp(x)); },
        [](double x, double) { return 1.0 / (1.0 + std::exp(-x)); });
}
NodeId Tape::sigmoid(NodeId a) {
    return unary_op(a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
                    [](double, double y) { return y * (1.0 - y); });
}
NodeId Tape::reciprocal(NodeId a) {
    return unary_op(a, [](double x) { return 1.0 / x; },
                    [](double, double y) { return -y * y; });
}
NodeId Tape::clamp_min(NodeId a, double floor) {
    return unary_op(
        a, [floor](double x) { return x > floor ? x : floor; },
        [floor](double x, double) { return x > floor ? 1.0 : 0.0; });
}
NodeId Tape::affine(NodeId a, double scale, double shift) {
    return unary_op(
        a, [scale, shift](double x) { return scale * x + shift; },
        [scale](double, double) { return scale; });
}

NodeId Tape::add(NodeId a, NodeId b) {
    check_same_shape(a, b, "add");
    const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    NodeId out = make_node(nodes_[a].rows, nodes_[a].cols, ng);
    const size_t n = nodes_[a].val.size();
    for (size_t i = 0; i < n; ++i) nodes_[out].val[i] = nodes_[a].val[i] + nodes_[b].val[i];
    if (ng) {
        pullbacks_.push_back([this, a, b, out]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            if (nodes_[a].needs_grad) {
                auto& ga = grad_buf(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (nodes_[b].needs_grad) {
                auto& gb = grad_buf(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i];
            }
        });
    }
    return out;
}

NodeId Tape::sub(NodeId a, NodeId b) {
    check_same_shape(a, b, "sub");
    const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    NodeId out = make_node(nodes_[a].rows, nodes_[a].cols, ng);
    const size_t n = nodes_[a].val.size();
    for (size_t i = 0; i < n; ++i) nodes_[out].val[i] = nodes_[a].val[i] - nodes_[b].val[i];
    if (ng) {
        pullbacks_.push_back([this, a, b, out]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            if (nodes_[a].needs_grad) {
                auto& ga = grad_buf(a);
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
            }
            if (nodes_[b].needs_grad) {
                auto& gb = grad_buf(b);
                for (size_t i = 0; i < go.size(); ++i) gb[i] -= go[i];
            }
        });
    }
    return out;
}

NodeId Tape::mul(NodeId a, NodeId b) {
    check_same_shape(a, b, "mul");
    const bool ng = nodes_[a].needs_grad || nodes_[b].needs_grad;
    NodeId out = make_node(nodes_[a].rows, nodes_[a].cols, ng);
    const size_t n = nodes_[a].val.size();
    for (size_t i = 0; i < n; ++i) nodes_[out].val[i] = nodes_[a].val[i] * nodes_[b].val[i];
    if (ng) {
        pullbacks_.push_back([this, a, b, out]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            if (nodes_[a].needs_grad) {
                auto& ga = grad_buf(a);
                const auto& vb = nodes_[b].val;
                for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i] * vb[i];
            }
            if (nodes_[b].needs_grad) {
                auto& gb = grad_buf(b);
                const auto& va = nodes_[a].val;
                for (size_t i = 0; i < go.size(); ++i) gb[i] += go[i] * va[i];
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// broadcasts
// ---------------------------------------------------------------------------

NodeId Tape::add_colvec(NodeId x, NodeId v) {
    const Node& nx = nodes_[x];
    if (nodes_[v].rows != nx.rows || nodes_[v].cols != 1)
        throw ContractViolation("add_colvec: v must be [rows x 1]");
    const bool ng = nx.needs_grad || nodes_[v].needs_grad;
    NodeId out = make_node(nx.rows, nx.cols, ng);
    for (int r = 0; r < nx.rows; ++r) {
        const double b = nodes_[v].val[r];
        for (int c = 0; c < nx.cols; ++c)
            nodes_[out].val[r * nx.cols + c] = nx.val[r * nx.cols + c] + b;
    }
    if (ng) {
        pullbacks_.push_back([this, x, v, out]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            const int R = nodes_[x].rows, C = nodes_[x].cols;
            if (nodes_[x].needs_grad) {
                auto& gx = grad_buf(x);
                for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i];
            }
            if (nodes_[v].needs_grad) {
                auto& gv = grad_buf(v);
                for (int r = 0; r < R; ++r)
                    for (int c = 0; c < C; ++c) gv[r] += go[r * C + c];
            }
        });
    }
    return out;
}

NodeId Tape::sub_colvec(NodeId x, NodeId v) {
    NodeId nv = neg(v);
    return add_colvec(x, nv);
}

NodeId Tape::mul_colvec(NodeId x, NodeId v) {
    const Node& nx = nodes_[x];
    if (nodes_[v].rows != nx.rows || nodes_[v].cols != 1)
        throw ContractViolation("mul_colvec: v must be [rows x 1]");
    const bool ng = nx.needs_grad || nodes_[v].needs_grad;
    NodeId out = make_node(nx.rows, nx.cols, ng);
    for (int r = 0; r < nx.rows; ++r) {
        const double b = nodes_[v].val[r];
        for (int c = 0; c < nx.cols; ++c)
            nodes_[out].val[r * nx.cols + c] = nx.val[r * nx.cols + c] * b;
    }
    if (ng) {
        pullbacks_.push_back([this, x, v, out]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            const int R = nodes_[x].rows, C = nodes_[x].cols;
            if (nodes_[x].needs_grad) {
                auto& gx = grad_buf(x);
                for (int r = 0; r < R; ++r) {
                    const double b = nodes_[v].val[r];
                    for (int c = 0; c < C; ++c) gx[r * C + c] += go[r * C + c] * b;
                }
            }
            if (nodes_[v].needs_grad) {
                auto& gv = grad_buf(v);
                for (int r = 0; r < R; ++r) {
                    double acc = 0;
                    for (int c = 0; c < C; ++c) acc += go[r * C + c] * nodes_[x].val[r * C + c];
                    gv[r] += acc;
                }
            }
        });
    }
    return out;
}

NodeId Tape::mul_scalar(NodeId x, NodeId s) {
    if (nodes_[s].val.size() != 1) throw ContractViolation("mul_scalar: s must be [1 x 1]");
    const Node& nx = nodes_[x];
    const bool ng = nx.needs_grad || nodes_[s].needs_grad;
    NodeId out = make_node(nx.rows, nx.cols, ng);
    const double sv = nodes_[s].val[0];
    for (size_t i = 0; i < nx.val.size(); ++i) nodes_[out].val[i] = nx.val[i] * sv;
    if (ng) {
        pullbacks_.push_back([this, x, s, out]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            if (nodes_[x].needs_grad) {
                auto& gx = grad_buf(x);
                const double sv = nodes_[s].val[0];
                for (size_t i = 0; i < go.size(); ++i) gx[i] += go[i] * sv;
            }
            if (nodes_[s].needs_grad) {
                auto& gs = grad_buf(s);
                double acc = 0;
                for (size_t i = 0; i < go.size(); ++i) acc += go[i] * nodes_[x].val[i];
                gs[0] += acc;
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// reductions
// ---------------------------------------------------------------------------

NodeId Tape::sum_all(NodeId a) {
    const Node& in = nodes_[a];
    NodeId out = make_node(1, 1, in.needs_grad);
    double acc = 0;
    for (double v : in.val) acc += v;
    nodes_[out].val[0] = acc;
    if (in.needs_grad) {
        pullbacks_.push_back([this, a, out]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            auto& ga = grad_buf(a);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += go[0];
        });
    }
    return out;
}

NodeId Tape::mean_all(NodeId a) {
    const double n = static_cast<double>(nodes_[a].val.size());
    return affine(sum_all(a), 1.0 / n, 0.0);
}

NodeId Tape::rowsum(NodeId a) {
    const Node& in = nodes_[a];
    NodeId out = make_node(in.rows, 1, in.needs_grad);
    for (int r = 0; r < in.rows; ++r) {
        double acc = 0;
        for (int c = 0; c < in.cols; ++c) acc += in.val[r * in.cols + c];
        nodes_[out].val[r] = acc;
    }
    if (in.needs_grad) {
        pullbacks_.push_back([this, a, out]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            auto& ga = grad_buf(a);
            const int R = nodes_[a].rows, C = nodes_[a].cols;
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) ga[r * C + c] += go[r];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// shape
// ---------------------------------------------------------------------------

NodeId Tape::reshape(NodeId a, int rows, int cols) {
    const Node& in = nodes_[a];
    if (static_cast<size_t>(rows) * cols != in.val.size())
        throw ContractViolation("reshape: element count mismatch");
    NodeId out = make_node(rows, cols, in.needs_grad);
    nodes_[out].val = in.val;
    if (in.needs_grad) {
        pullbacks_.push_back([this, a, out]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            auto& ga = grad_buf(a);
            for (size_t i = 0; i < go.size(); ++i) ga[i] += go[i];
        });
    }
    return out;
}

NodeId Tape::concat_cols(const std::vector<NodeId>& parts) {
    if (parts.empty()) throw ContractViolation("concat_cols: empty");
    const int R = nodes_[parts[0]].rows;
    int total_cols = 0;
    bool ng = false;
    for (NodeId p : parts) {
        if (nodes_[p].rows != R) throw ContractViolation("concat_cols: row mismatch");
        total_cols += nodes_[p].cols;
        ng = ng || nodes_[p].needs_grad;
    }
    NodeId out = make_node(R, total_cols, ng);
    int off = 0;
    for (NodeId p : parts) {
        const int C = nodes_[p].cols;
        for (int r = 0; r < R; ++r)
            std::copy_n(&nodes_[p].val[r * C], C, &nodes_[out].val[r * total_cols + off]);
        off += C;
    }
    if (ng) {
        std::vector<NodeId> ps = parts;
        pullbacks_.push_back([this, ps, out, total_cols, R]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            int off = 0;
            for (NodeId p : ps) {
                const int C = nodes_[p].cols;
                if (nodes_[p].needs_grad) {
                    auto& gp = grad_buf(p);
                    for (int r = 0; r < R; ++r)
                        for (int c = 0; c < C; ++c)
                            gp[r * C + c] += go[r * total_cols + off + c];
                }
                off += C;
            }
        });
    }
    return out;
}

NodeId Tape::slice_cols(NodeId a, int col_begin, int col_end) {
    const Node& in = nodes_[a];
    if (!(0 <= col_begin && col_begin < col_end && col_end <= in.cols))
        throw ContractViolation("slice_cols: bad range");
    const int C = col_end - col_begin;
    NodeId out = make_node(in.rows, C, in.needs_grad);
    for (int r = 0; r < in.rows; ++r)
        std::copy_n(&in.val[r * in.cols + col_begin], C, &nodes_[out].val[r * C]);
    if (in.needs_grad) {
        pullbacks_.push_back([this, a, out, col_begin, C]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            auto& ga = grad_buf(a);
            const int R = nodes_[a].rows, CA = nodes_[a].cols;
            for (int r = 0; r < R; ++r)
                for (int c = 0; c < C; ++c) ga[r * CA + col_begin + c] += go[r * C + c];
        });
    }
    return out;
}

NodeId Tape::gather_rows(NodeId a, std::vector<int> row_indices) {
    const Node& in = nodes_[a];
    const int M = static_cast<int>(row_indices.size());
    NodeId out = make_node(M, in.cols, in.needs_grad);
    for (int m = 0; m < M; ++m) {
        const int r = row_indices[m];
        if (r < 0 || r >= in.rows) throw ContractViolation("gather_rows: index out of range");
        std::copy_n(&in.val[static_cast<size_t>(r) * in.cols], in.cols,
                    &nodes_[out].val[static_cast<size_t>(m) * in.cols]);
    }
    if (in.needs_grad) {
        pullbacks_.push_back([this, a, out, idx = std::move(row_indices)]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            auto& ga = grad_buf(a);
            const int C = nodes_[a].cols;
            for (size_t m = 0; m < idx.size(); ++m)
                for (int c = 0; c < C; ++c) ga[idx[m] * C + c] += go[m * C + c];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// linear algebra
// ---------------------------------------------------------------------------

NodeId Tape::linear(NodeId x, NodeId w, NodeId bias) {
    const Node& nx = nodes_[x];
    const Node& nw = nodes_[w];
    if (nx.cols != nw.cols) throw ContractViolation("linear: inner dimension mismatch");
    const int N = nx.rows, In = nx.cols, Out = nw.rows;
    bool ng = nx.needs_grad || nw.needs_grad;
    if (bias >= 0) {
        if (nodes_[bias].rows != 1 || nodes_[bias].cols != Out)
            throw ContractViolation("linear: bias must be [1 x out]");
        ng = ng || nodes_[bias].needs_grad;
    }
    NodeId out = make_node(N, Out, ng);
    {
        MapConstMat X(nx.val.data(), N, In);
        MapConstMat W(nw.val.data(), Out, In);
        MapMat Y(nodes_[out].val.data(), N, Out);
        Y.noalias() = X * W.transpose();
        if (bias >= 0) {
            Eigen::Map<const Eigen::RowVectorXd> B(nodes_[bias].val.data(), Out);
            Y.rowwise() += B;
        }
    }
    if (ng) {
        pullbacks_.push_back([this, x, w, bias, out, N, In, Out]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            MapConstMat GY(go.data(), N, Out);
            if (nodes_[x].needs_grad) {
                MapConstMat W(nodes_[w].val.data(), Out, In);
                MapMat GX(grad_buf(x).data(), N, In);
                GX.noalias() += GY * W;
            }
            if (nodes_[w].needs_grad) {
                MapConstMat X(nodes_[x].val.data(), N, In);
                MapMat GW(grad_buf(w).data(), Out, In);
                GW.noalias() += GY.transpose() * X;
            }
            if (bias >= 0 && nodes_[bias].needs_grad) {
                Eigen::Map<Eigen::RowVectorXd> GB(grad_buf(bias).data(), Out);
                GB += GY.colwise().sum();
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// neural ops
// ---------------------------------------------------------------------------

NodeId Tape::conv3x3(NodeId x, NodeId w, NodeId bias, int H, int W) {
    const Node& nx = nodes_[x];
    const Node& nw = nodes_[w];
    const int Cin = nx.rows;
    if (nx.cols != H * W) throw ContractViolation("conv3x3: input shape mismatch");
    if (nw.cols != Cin * 9) throw ContractViolation("conv3x3: weight shape mismatch");
    const int Cout = nw.rows;
    bool ng = nx.needs_grad || nw.needs_grad;
    if (bias >= 0) ng = ng || nodes_[bias].needs_grad;

    NodeId out = make_node(Cout, H * W, ng);
    auto& ov = nodes_[out].val;
    for (int co = 0; co < Cout; ++co) {
        const double b = bias >= 0 ? nodes_[bias].val[co] : 0.0;
        double* orow = &ov[static_cast<size_t>(co) * H * W];
        std::fill_n(orow, H * W, b);
        for (int ci = 0; ci < Cin; ++ci) {
            const double* irow = &nx.val[static_cast<size_t>(ci) * H * W];
            const double* ker = &nw.val[static_cast<size_t>(co) * Cin * 9 + ci * 9];
            for (int ky = -1; ky <= 1; ++ky) {
                for (int kx = -1; kx <= 1; ++kx) {
                    const double kv = ker[(ky + 1) * 3 + (kx + 1)];
                    if (kv == 0.0) continue;
                    const int y0 = std::max(0, -ky), y1 = std::min(H, H - ky);
                    const int x0 = std::max(0, -kx), x1 = std::min(W, W - kx);
                    for (int y = y0; y < y1; ++y) {
                        const double* src = irow + (y + ky) * W + kx;
                        double* dst = orow + y * W;
                        for (int px = x0; px < x1; ++px) dst[px] += kv * src[px];
                    }
                }
            }
        }
    }
    if (ng) {
        pullbacks_.push_back([this, x, w, bias, out, H, W, Cin, Cout]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            for (int co = 0; co < Cout; ++co) {
                const double* grow = &go[static_cast<size_t>(co) * H * W];
                if (bias >= 0 && nodes_[bias].needs_grad) {
                    double acc = 0;
                    for (int i = 0; i < H * W; ++i) acc += grow[i];
                    grad_buf(bias)[co] += acc;
                }
                for (int ci = 0; ci < Cin; ++ci) {
                    const double* irow = &nodes_[x].val[static_cast<size_t>(ci) * H * W];
                    const double* ker =
                        &nodes_[w].val[static_cast<size_t>(co) * Cin * 9 + ci * 9];
                    for (int ky = -1; ky <= 1; ++ky) {
                        for (int kx = -1; kx <= 1; ++kx) {
                            const int kidx = (ky + 1) * 3 + (kx + 1);
                            const int y0 = std::max(0, -ky), y1 = std::min(H, H - ky);
                            const int x0 = std::max(0, -kx), x1 = std::min(W, W - kx);
                            if (nodes_[w].needs_grad) {
                                double acc = 0;
                                for (int y = y0; y < y1; ++y) {
                                    const double* src = irow + (y + ky) * W + kx;
                                    const double* g = grow + y * W;
                                    for (int px = x0; px < x1; ++px) acc += g[px] * src[px];
                                }
                                grad_buf(w)[static_cast<size_t>(co) * Cin * 9 + ci * 9 + kidx] += acc;
                            }
                            if (nodes_[x].needs_grad) {
                                const double kv = ker[kidx];
                                if (kv != 0.0) {
                                    auto& gx = grad_buf(x);
                                    double* gi = &gx[static_cast<size_t>(ci) * H * W];
                                    for (int y = y0; y < y1; ++y) {
                                        double* dst = gi + (y + ky) * W + kx;
                                        const double* g = grow + y * W;
                                        for (int px = x0; px < x1; ++px) dst[px] += kv * g[px];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    }
    return out;
}

NodeId Tape::avgpool2(NodeId x, int H, int W) {
    const Node& nx = nodes_[x];
    if (H % 2 || W % 2) throw ContractViolation("avgpool2: dimensions must be even");
    if (nx.cols != H * W) throw ContractViolation("avgpool2: input shape mismatch");
    const int C = nx.rows, Ho = H / 2, Wo = W / 2;
    NodeId out = make_node(C, Ho * Wo, nx.needs_grad);
    for (int c = 0; c < C; ++c) {
        const double* in = &nx.val[static_cast<size_t>(c) * H * W];
        double* o = &nodes_[out].val[static_cast<size_t>(c) * Ho * Wo];
        for (int y = 0; y < Ho; ++y)
            for (int px = 0; px < Wo; ++px)
                o[y * Wo + px] = 0.25 * (in[(2 * y) * W + 2 * px] + in[(2 * y) * W + 2 * px + 1] +
                                         in[(2 * y + 1) * W + 2 * px] +
                                         in[(2 * y + 1) * W + 2 * px + 1]);
    }
    if (nx.needs_grad) {
        pullbacks_.push_back([this, x, out, H, W, C]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            auto& gx = grad_buf(x);
            const int Ho = H / 2, Wo = W / 2;
            for (int c = 0; c < C; ++c) {
                const double* g = &go[static_cast<size_t>(c) * Ho * Wo];
                double* gi = &gx[static_cast<size_t>(c) * H * W];
                for (int y = 0; y < Ho; ++y)
                    for (int px = 0; px < Wo; ++px) {
                        const double v = 0.25 * g[y * Wo + px];
                        gi[(2 * y) * W + 2 * px] += v;
                        gi[(2 * y) * W + 2 * px + 1] += v;
                        gi[(2 * y + 1) * W + 2 * px] += v;
                        gi[(2 * y + 1) * W + 2 * px + 1] += v;
                    }
            }
        });
    }
    return out;
}

NodeId Tape::softmax_rows(NodeId a) {
    const Node& in = nodes_[a];
    NodeId out = make_node(in.rows, in.cols, in.needs_grad);
    const int R = in.rows, C = in.cols;
    for (int r = 0; r < R; ++r) {
        const double* x = &in.val[static_cast<size_t>(r) * C];
        double* y = &nodes_[out].val[static_cast<size_t>(r) * C];
        double m = x[0];
        for (int c = 1; c < C; ++c) m = std::max(m, x[c]);
        double z = 0;
        for (int c = 0; c < C; ++c) {
            y[c] = std::exp(x[c] - m);
            z += y[c];
        }
        for (int c = 0; c < C; ++c) y[c] /= z;
    }
    if (in.needs_grad) {
        pullbacks_.push_back([this, a, out, R, C]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            auto& ga = grad_buf(a);
            for (int r = 0; r < R; ++r) {
                const double* y = &nodes_[out].val[static_cast<size_t>(r) * C];
                const double* g = &go[static_cast<size_t>(r) * C];
                double dot = 0;
                for (int c = 0; c < C; ++c) dot += g[c] * y[c];
                for (int c = 0; c < C; ++c) ga[r * C + c] += (g[c] - dot) * y[c];
            }
        });
    }
    return out;
}

NodeId Tape::cross_entropy_rows(NodeId logits, std::vector<int> targets,
                                std::vector<uint8_t> mask) {
    const Node& in = nodes_[logits];
    const int R = in.rows, C = in.cols;
    if (static_cast<int>(targets.size()) != R)
        throw ContractViolation("cross_entropy_rows: target count mismatch");
    if (!mask.empty() && static_cast<int>(mask.size()) != R)
        throw ContractViolation("cross_entropy_rows: mask size mismatch");
    NodeId out = make_node(R, 1, in.needs_grad);
    for (int r = 0; r < R; ++r) {
        if (!mask.empty() && !mask[r]) {
            nodes_[out].val[r] = 0.0;
            continue;
        }
        const double* x = &in.val[static_cast<size_t>(r) * C];
        double m = x[0];
        for (int c = 1; c < C; ++c) m = std::max(m, x[c]);
        double z = 0;
        for (int c = 0; c < C; ++c) z += std::exp(x[c] - m);
        nodes_[out].val[r] = m + std::log(z) - x[targets[r]];
    }
    if (in.needs_grad) {
        pullbacks_.push_back(
            [this, logits, out, R, C, t = std::move(targets), mk = std::move(mask)]() {
                const auto& go = nodes_[out].grad;
                if (go.empty()) return;
                auto& gx = grad_buf(logits);
                for (int r = 0; r < R; ++r) {
                    if ((!mk.empty() && !mk[r]) || go[r] == 0.0) continue;
                    const double* x = &nodes_[logits].val[static_cast<size_t>(r) * C];
                    double m = x[0];
                    for (int c = 1; c < C; ++c) m = std::max(m, x[c]);
                    double z = 0;
                    for (int c = 0; c < C; ++c) z += std::exp(x[c] - m);
                    for (int c = 0; c < C; ++c) {
                        double p = std::exp(x[c] - m) / z;
                        gx[r * C + c] += go[r] * (p - (c == t[r] ? 1.0 : 0.0));
                    }
                }
            });
    }
    return out;
}

// ---------------------------------------------------------------------------
// rendering ops
// ---------------------------------------------------------------------------

NodeId Tape::sdf_to_density(NodeId s, NodeId beta) {
    if (nodes_[beta].val.size() != 1)
        throw ContractViolation("sdf_to_density: beta must be [1 x 1]");
    const double b = nodes_[beta].val[0];
    if (!(b > 0)) throw ContractViolation("sdf_to_density: beta must be positive");
    const Node& in = nodes_[s];
    const bool ng = in.needs_grad || nodes_[beta].needs_grad;
    NodeId out = make_node(in.rows, in.cols, ng);
    for (size_t i = 0; i < in.val.size(); ++i) {
        const double x = in.val[i];
        nodes_[out].val[i] = x <= 0 ? std::exp(x / b) / (2 * b)
                                    : (1.0 - 0.5 * std::exp(-x / b)) / b;
    }
    if (ng) {
        pullbacks_.push_back([this, s, beta, out]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            const double b = nodes_[beta].val[0];
            const auto& x = nodes_[s].val;
            const bool gs_on = nodes_[s].needs_grad;
            const bool gb_on = nodes_[beta].needs_grad;
            double gb_acc = 0;
            auto* gs = gs_on ? &grad_buf(s) : nullptr;
            for (size_t i = 0; i < go.size(); ++i) {
                const double e = std::exp(-std::abs(x[i]) / b);
                double ds, db;
                if (x[i] <= 0) {
                    // sigma = e/(2b) with e = exp(x/b)
                    ds = e / (2 * b * b);
                    db = -e * (b + x[i]) / (2 * b * b * b);
                } else {
                    // sigma = (1 - e/2)/b with e = exp(-x/b)
                    ds = e / (2 * b * b);
                    db = -1.0 / (b * b) + e * (b - x[i]) / (2 * b * b * b);
                }
                if (gs_on) (*gs)[i] += go[i] * ds;
                if (gb_on) gb_acc += go[i] * db;
            }
            if (gb_on) grad_buf(beta)[0] += gb_acc;
        });
    }
    return out;
}

NodeId Tape::cumsum_exclusive_rows(NodeId a) {
    const Node& in = nodes_[a];
    const int R = in.rows, C = in.cols;
    NodeId out = make_node(R, C, in.needs_grad);
    for (int r = 0; r < R; ++r) {
        double acc = 0;
        for (int c = 0; c < C; ++c) {
            nodes_[out].val[r * C + c] = acc;
            acc += in.val[r * C + c];
        }
    }
    if (in.needs_grad) {
        pullbacks_.push_back([this, a, out, R, C]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            auto& ga = grad_buf(a);
            for (int r = 0; r < R; ++r) {
                double acc = 0;
                for (int c = C - 1; c >= 0; --c) {
                    ga[r * C + c] += acc;
                    acc += go[r * C + c];
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// geometry ops
// ---------------------------------------------------------------------------

NodeId Tape::se3_transform(NodeId delta, const std::vector<double>& points, Se3Kind kind) {
    if (nodes_[delta].val.size() != 6)
        throw ContractViolation("se3_transform: delta must be [1 x 6]");
    const int N = static_cast<int>(points.size() / 3);
    const Vec3 w(nodes_[delta].val[0], nodes_[delta].val[1], nodes_[delta].val[2]);
    const Vec3 v(nodes_[delta].val[3], nodes_[delta].val[4], nodes_[delta].val[5]);
    const Mat3 R = so3_exp(w);

    NodeId out = make_node(N, 3, nodes_[delta].needs_grad);
    for (int i = 0; i < N; ++i) {
        const Vec3 x(points[3 * i], points[3 * i + 1], points[3 * i + 2]);
        Vec3 y;
        switch (kind) {
            case Se3Kind::Point: y = R * x + v; break;
            case Se3Kind::Vector: y = R * x; break;
            case Se3Kind::InversePoint: y = R.transpose() * (x - v); break;
        }
        for (int a = 0; a < 3; ++a) nodes_[out].val[3 * i + a] = y[a];
    }
    if (nodes_[delta].needs_grad) {
        pullbacks_.push_back([this, delta, out, pts = points, kind, N]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            const Vec3 w(nodes_[delta].val[0], nodes_[delta].val[1], nodes_[delta].val[2]);
            const Vec3 v(nodes_[delta].val[3], nodes_[delta].val[4], nodes_[delta].val[5]);
            const Mat3 R = so3_exp(w);
            auto& gd = grad_buf(delta);
            Vec3 gw = Vec3::Zero(), gv = Vec3::Zero();
            if (kind == Se3Kind::InversePoint) {
                // y = exp(-w) z with z = x - v.
                const Mat3 JrT = so3_right_jacobian(-w).transpose();
                for (int i = 0; i < N; ++i) {
                    const Vec3 g(go[3 * i], go[3 * i + 1], go[3 * i + 2]);
                    const Vec3 z(pts[3 * i] - v.x(), pts[3 * i + 1] - v.y(),
                                 pts[3 * i + 2] - v.z());
                    gv -= R * g;
                    gw -= JrT * z.cross(R * g);
                }
            } else {
                const Mat3 JrT = so3_right_jacobian(w).transpose();
                for (int i = 0; i < N; ++i) {
                    const Vec3 g(go[3 * i], go[3 * i + 1], go[3 * i + 2]);
                    const Vec3 x(pts[3 * i], pts[3 * i + 1], pts[3 * i + 2]);
                    gw += JrT * x.cross(R.transpose() * g);
                    if (kind == Se3Kind::Point) gv += g;
                }
            }
            for (int a = 0; a < 3; ++a) {
                gd[a] += gw[a];
                gd[3 + a] += gv[a];
            }
        });
    }
    return out;
}

NodeId Tape::ray_points(NodeId origin, NodeId dirs, const std::vector<double>& ts,
                        int num_rays, int samples_per_ray) {
    if (nodes_[origin].val.size() != 3)
        throw ContractViolation("ray_points: origin must be [1 x 3]");
    if (nodes_[dirs].rows != num_rays || nodes_[dirs].cols != 3)
        throw ContractViolation("ray_points: dirs must be [R x 3]");
    if (ts.size() != static_cast<size_t>(num_rays) * samples_per_ray)
        throw ContractViolation("ray_points: t grid size mismatch");
    const bool ng = nodes_[origin].needs_grad || nodes_[dirs].needs_grad;
    NodeId out = make_node(num_rays * samples_per_ray, 3, ng);
    const auto& o = nodes_[origin].val;
    const auto& d = nodes_[dirs].val;
    for (int r = 0; r < num_rays; ++r)
        for (int k = 0; k < samples_per_ray; ++k) {
            const double t = ts[r * samples_per_ray + k];
            const size_t row = static_cast<size_t>(r) * samples_per_ray + k;
            for (int a = 0; a < 3; ++a)
                nodes_[out].val[row * 3 + a] = o[a] + t * d[r * 3 + a];
        }
    if (ng) {
        pullbacks_.push_back([this, origin, dirs, out, ts, num_rays, samples_per_ray]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            const bool g_o = nodes_[origin].needs_grad;
            const bool g_d = nodes_[dirs].needs_grad;
            for (int r = 0; r < num_rays; ++r)
                for (int k = 0; k < samples_per_ray; ++k) {
                    const double t = ts[r * samples_per_ray + k];
                    const size_t row = static_cast<size_t>(r) * samples_per_ray + k;
                    for (int a = 0; a < 3; ++a) {
                        const double g = go[row * 3 + a];
                        if (g_o) grad_buf(origin)[a] += g;
                        if (g_d) grad_buf(dirs)[r * 3 + a] += t * g;
                    }
                }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// grid interpolation
// ---------------------------------------------------------------------------

namespace {

struct Cell {
    int ix, iy, iz;
    double fx, fy, fz;
};

inline Cell locate(const GridMeta& m, double px, double py, double pz) {
    Cell c;
    const double ux = (px - m.origin.x()) / m.voxel;
    const double uy = (py - m.origin.y()) / m.voxel;
    const double uz = (pz - m.origin.z()) / m.voxel;
    c.ix = std::clamp(static_cast<int>(std::floor(ux)), 0, m.nx - 2);
    c.iy = std::clamp(static_cast<int>(std::floor(uy)), 0, m.ny - 2);
    c.iz = std::clamp(static_cast<int>(std::floor(uz)), 0, m.nz - 2);
    c.fx = std::clamp(ux - c.ix, 0.0, 1.0);
    c.fy = std::clamp(uy - c.iy, 0.0, 1.0);
    c.fz = std::clamp(uz - c.iz, 0.0, 1.0);
    return c;
}

}  // namespace

NodeId Tape::trilerp(NodeId grid, NodeId points, const GridMeta& meta) {
    const Node& ng_ = nodes_[grid];
    const Node& np = nodes_[points];
    if (ng_.rows != meta.vertex_count() || ng_.cols != meta.feature_dim)
        throw ContractViolation("trilerp: grid shape does not match meta");
    if (np.cols != 3) throw ContractViolation("trilerp: points must be [N x 3]");
    const int N = np.rows, F = meta.feature_dim;
    const bool want_grad = ng_.needs_grad || np.needs_grad;
    NodeId out = make_node(N, F, want_grad);
    const auto& gv = ng_.val;
    for (int i = 0; i < N; ++i) {
        const Cell c = locate(meta, np.val[3 * i], np.val[3 * i + 1], np.val[3 * i + 2]);
        double* o = &nodes_[out].val[static_cast<size_t>(i) * F];
        std::fill_n(o, F, 0.0);
        for (int dx = 0; dx < 2; ++dx)
            for (int dy = 0; dy < 2; ++dy)
                for (int dz = 0; dz < 2; ++dz) {
                    const double wgt = (dx ? c.fx : 1 - c.fx) * (dy ? c.fy : 1 - c.fy) *
                                       (dz ? c.fz : 1 - c.fz);
                    if (wgt == 0.0) continue;
                    const double* f =
                        &gv[static_cast<size_t>(meta.vertex_index(c.ix + dx, c.iy + dy,
                                                                  c.iz + dz)) *
                            F];
                    for (int k = 0; k < F; ++k) o[k] += wgt * f[k];
                }
    }
    if (want_grad) {
        pullbacks_.push_back([this, grid, points, out, meta, N, F]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            const bool g_grid = nodes_[grid].needs_grad;
            const bool g_pts = nodes_[points].needs_grad;
            const auto& pv = nodes_[points].val;
            const auto& gv = nodes_[grid].val;
            for (int i = 0; i < N; ++i) {
                const Cell c = locate(meta, pv[3 * i], pv[3 * i + 1], pv[3 * i + 2]);
                const double* g = &go[static_cast<size_t>(i) * F];
                double dpdx = 0, dpdy = 0, dpdz = 0;
                for (int dx = 0; dx < 2; ++dx)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dz = 0; dz < 2; ++dz) {
                            const double wx = dx ? c.fx : 1 - c.fx;
                            const double wy = dy ? c.fy : 1 - c.fy;
                            const double wz = dz ? c.fz : 1 - c.fz;
                            const size_t row = static_cast<size_t>(
                                meta.vertex_index(c.ix + dx, c.iy + dy, c.iz + dz));
                            if (g_grid) {
                                auto& gg = grad_buf(grid);
                                const double wgt = wx * wy * wz;
                                if (wgt != 0.0)
                                    for (int k = 0; k < F; ++k) gg[row * F + k] += wgt * g[k];
                            }
                            if (g_pts) {
                                const double* f = &gv[row * F];
                                double dot = 0;
                                for (int k = 0; k < F; ++k) dot += f[k] * g[k];
                                dpdx += (dx ? 1.0 : -1.0) * wy * wz * dot;
                                dpdy += wx * (dy ? 1.0 : -1.0) * wz * dot;
                                dpdz += wx * wy * (dz ? 1.0 : -1.0) * dot;
                            }
                        }
                if (g_pts) {
                    auto& gp = grad_buf(points);
                    gp[3 * i] += dpdx / meta.voxel;
                    gp[3 * i + 1] += dpdy / meta.voxel;
                    gp[3 * i + 2] += dpdz / meta.voxel;
                }
            }
        });
    }
    return out;
}

NodeId Tape::trilerp_dx(NodeId grid, NodeId points, const GridMeta& meta, int axis) {
    const Node& ng_ = nodes_[grid];
    const Node& np = nodes_[points];
    if (np.needs_grad)
        throw ContractViolation("trilerp_dx: points must be constant");
    if (axis < 0 || axis > 2) throw ContractViolation("trilerp_dx: bad axis");
    const int N = np.rows, F = meta.feature_dim;
    NodeId out = make_node(N, F, ng_.needs_grad);
    const auto& gv = ng_.val;
    auto stencil = [axis](const Cell& c, int dx, int dy, int dz) {
        const double wx = dx ? c.fx : 1 - c.fx;
        const double wy = dy ? c.fy : 1 - c.fy;
        const double wz = dz ? c.fz : 1 - c.fz;
        switch (axis) {
            case 0: return (dx ? 1.0 : -1.0) * wy * wz;
            case 1: return wx * (dy ? 1.0 : -1.0) * wz;
            default: return wx * wy * (dz ? 1.0 : -1.0);
        }
    };
    for (int i = 0; i < N; ++i) {
        const Cell c = locate(meta, np.val[3 * i], np.val[3 * i + 1], np.val[3 * i + 2]);
        double* o = &nodes_[out].val[static_cast<size_t>(i) * F];
        std::fill_n(o, F, 0.0);
        for (int dx = 0; dx < 2; ++dx)
            for (int dy = 0; dy < 2; ++dy)
                for (int dz = 0; dz < 2; ++dz) {
                    const double wgt = stencil(c, dx, dy, dz) / meta.voxel;
                    const double* f =
                        &gv[static_cast<size_t>(meta.vertex_index(c.ix + dx, c.iy + dy,
                                                                  c.iz + dz)) *
                            F];
                    for (int k = 0; k < F; ++k) o[k] += wgt * f[k];
                }
    }
    if (ng_.needs_grad) {
        pullbacks_.push_back([this, grid, points, out, meta, N, F, stencil]() {
            const auto& go = nodes_[out].grad;
            if (go.empty()) return;
            auto& gg = grad_buf(grid);
            const auto& pv = nodes_[points].val;
            for (int i = 0; i < N; ++i) {
                const Cell c = locate(meta, pv[3 * i], pv[3 * i + 1], pv[3 * i + 2]);
                const double* g = &go[static_cast<size_t>(i) * F];
                for (int dx = 0; dx < 2; ++dx)
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dz = 0; dz < 2; ++dz) {
                            const double wgt = stencil(c, dx, dy, dz) / meta.voxel;
                            const size_t row = static_cast<size_t>(
                                meta.vertex_index(c.ix + dx, c.iy + dy, c.iz + dz));
                            for (int k = 0; k < F; ++k) gg[row * F + k] += wgt * g[k];
                        }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// backward
// ---------------------------------------------------------------------------

GradientMap Tape::backward(NodeId seed) {
    if (nodes_[seed].val.size() != 1)
        throw ContractViolation("backward: seed must be a scalar node");
    for (Node& n : nodes_) n.grad.clear();
    grad_buf(seed)[0] = 1.0;
    for (auto it = pullbacks_.rbegin(); it != pullbacks_.rend(); ++it) (*it)();

    GradientMap out;
    for (const Node& n : nodes_) {
        if (!n.param || n.grad.empty()) continue;
        auto [it, inserted] = out.try_emplace(n.param, n.grad);
        if (!inserted)
            for (size_t i = 0; i < n.grad.size(); ++i) it->second[i] += n.grad[i];
    }
    return out;
}

void Tape::reset() {
    nodes_.clear();
    pullbacks_.clear();
}

void accumulate_gradients(const GradientMap& grads) {
    for (const auto& [param, g] : grads) {
        auto* p = const_cast<Parameter*>(param);
        p->ensure_grad();
        for (size_t i = 0; i < g.size(); ++i) p->grad[i] += g[i];
    }
}

// ---------------------------------------------------------------------------
// finite differences
// ---------------------------------------------------------------------------

FdReport finite_diff_check(const std::function<double(GradientMap*)>& fn,
                           const std::vector<Parameter*>& params, double step,
                           int max_entries, uint64_t seed) {
    FdReport report;
    GradientMap analytic;
    fn(&analytic);

    for (Parameter* p : params) {
        FdBlockReport blk;
        blk.name = p->name;
        const auto it = analytic.find(p);
        std::vector<size_t> entries;
        if (max_entries <= 0 || static_cast<size_t>(max_entries) >= p->value.size()) {
            entries.resize(p->value.size());
            for (size_t i = 0; i < entries.size(); ++i) entries[i] = i;
        } else {
            Rng rng(hash_combine(seed, std::hash<std::string>{}(p->name)));
            for (int i = 0; i < max_entries; ++i) entries.push_back(rng.below(p->value.size()));
        }
        for (size_t idx : entries) {
            const double saved = p->value[idx];
            p->value[idx] = saved + step;
            const double f_plus = fn(nullptr);
            p->value[idx] = saved - step;
            const double f_minus = fn(nullptr);
            p->value[idx] = saved;
            if (!std::isfinite(f_plus) || !std::isfinite(f_minus)) {
                report.nonfinite_encountered = true;
                continue;
            }
            const double fd = (f_plus - f_minus) / (2 * step);
            const double an = (it != analytic.end() && idx < it->second.size())
                                  ? it->second[idx]
                                  : 0.0;
            const double denom = std::max({std::abs(fd), std::abs(an), 1e-6});
            const double rel = std::abs(fd - an) / denom;
            if (rel > blk.max_rel_err) {
                blk.max_rel_err = rel;
                blk.max_abs_err = std::abs(fd - an);
                blk.worst_analytic = an;
                blk.worst_numeric = fd;
            }
            ++blk.entries_checked;
        }
        report.max_rel_err = std::max(report.max_rel_err, blk.max_rel_err);
        report.blocks.push_back(std::move(blk));
    }
    return report;
}

}  // namespace neslam
