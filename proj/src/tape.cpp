#include "moiie/tape.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "kernels.hpp"

namespace moiie {

namespace {

#define MOIIE_DISPATCH(dt, ...)                \
    do {                                       \
        if ((dt) == Dtype::F32) {              \
            using scalar_t = float;            \
            __VA_ARGS__;                       \
        } else {                               \
            using scalar_t = double;           \
            __VA_ARGS__;                       \
        }                                      \
    } while (0)

uint64_t fnv_mix(uint64_t h, uint64_t x) {
    h ^= x;
    h *= 1099511628211ull;
    return h;
}

}  // namespace

int32_t Tape::require(Value v) const {
    if (!v.valid() || v.id >= static_cast<int32_t>(nodes_.size()))
        throw ShapeError("invalid tape value handle");
    return v.id;
}

const Tensor& Tape::val_of(int32_t id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.ext ? *n.ext : n.val;
}

bool Tape::grad_present(int32_t id) const { return grads_[static_cast<size_t>(id)].defined(); }

Tensor& Tape::grad_target(int32_t id) {
    Tensor& g = grads_[static_cast<size_t>(id)];
    if (!g.defined()) g = Tensor::zeros(val_of(id).shape(), val_of(id).dtype());
    return g;
}

void Tape::accumulate_grad(int32_t id, const Tensor& g) {
    Tensor& dst = grad_target(id);
    MOIIE_DISPATCH(dtype_, {
        auto d = dst.as<scalar_t>();
        auto s = g.as<scalar_t>();
        for (size_t i = 0; i < d.size(); ++i) d[i] += s[i];
    });
}

bool Tape::any_requires_grad(const std::vector<int32_t>& ids) const {
    return std::any_of(ids.begin(), ids.end(),
                       [&](int32_t i) { return nodes_[static_cast<size_t>(i)].requires_grad; });
}

Value Tape::emit(Tensor out, std::vector<int32_t> inputs, std::function<void(Tape&, int32_t)> bw,
                 const char* op_name) {
    out.check_finite(std::string(op_name) + " output");
    Node n;
    n.val = std::move(out);
    n.inputs = std::move(inputs);
    n.requires_grad = any_requires_grad(n.inputs);
    if (n.requires_grad) n.backward_fn = std::move(bw);
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return Value{static_cast<int32_t>(nodes_.size() - 1)};
}

Value Tape::param(Tensor& external, bool trainable) {
    if (external.dtype() != dtype_) throw ShapeError("parameter dtype does not match tape dtype");
    external.check_finite("parameter leaf");
    Node n;
    n.ext = &external;
    n.requires_grad = trainable;
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return Value{static_cast<int32_t>(nodes_.size() - 1)};
}

Value Tape::input(Tensor t, bool requires_grad) {
    if (t.dtype() != dtype_) throw ShapeError("input dtype does not match tape dtype");
    t.check_finite("input leaf");
    Node n;
    n.val = std::move(t);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    grads_.emplace_back();
    return Value{static_cast<int32_t>(nodes_.size() - 1)};
}

Value Tape::matmul(Value av, Value bv) {
    const int32_t ai = require(av), bi = require(bv);
    const Tensor &a = val_of(ai), &b = val_of(bi);
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.rows())
        throw ShapeError("matmul: incompatible shapes " + shape_to_string(a.shape()) + " · " +
                         shape_to_string(b.shape()));
    const int64_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor out({m, n}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        kernels::matmul_nn<scalar_t, false>(a.as<scalar_t>().data(), b.as<scalar_t>().data(),
                                            out.as<scalar_t>().data(), m, k, n);
    });
    auto bw = [ai, bi, m, k, n](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            const scalar_t* gyp = gy.as<scalar_t>().data();
            if (t.nodes_[static_cast<size_t>(ai)].requires_grad) {
                // dA += dY · B^T
                kernels::matmul_nt<scalar_t, true>(gyp, t.val_of(bi).as<scalar_t>().data(),
                                                   t.grad_target(ai).as<scalar_t>().data(), m, n, k);
            }
            if (t.nodes_[static_cast<size_t>(bi)].requires_grad) {
                // dB += A^T · dY
                kernels::matmul_tn<scalar_t, true>(t.val_of(ai).as<scalar_t>().data(), gyp,
                                                   t.grad_target(bi).as<scalar_t>().data(), m, k, n);
            }
        });
    };
    return emit(std::move(out), {ai, bi}, std::move(bw), "matmul");
}

Value Tape::matmul_nt(Value av, Value bv) {
    const int32_t ai = require(av), bi = require(bv);
    const Tensor &a = val_of(ai), &b = val_of(bi);
    if (a.rank() != 2 || b.rank() != 2 || a.cols() != b.cols())
        throw ShapeError("matmul_nt: incompatible shapes");
    const int64_t m = a.rows(), k = a.cols(), n = b.rows();
    Tensor out({m, n}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        kernels::matmul_nt<scalar_t, false>(a.as<scalar_t>().data(), b.as<scalar_t>().data(),
                                            out.as<scalar_t>().data(), m, k, n);
    });
    auto bw = [ai, bi, m, k, n](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            const scalar_t* gyp = gy.as<scalar_t>().data();
            if (t.nodes_[static_cast<size_t>(ai)].requires_grad) {
                // dA += dY · B       (dY:[m,n], B:[n,k])
                kernels::matmul_nn<scalar_t, true>(gyp, t.val_of(bi).as<scalar_t>().data(),
                                                   t.grad_target(ai).as<scalar_t>().data(), m, n, k);
            }
            if (t.nodes_[static_cast<size_t>(bi)].requires_grad) {
                // dB += dY^T · A     (dB:[n,k])
                kernels::matmul_tn<scalar_t, true>(gyp, t.val_of(ai).as<scalar_t>().data(),
                                                   t.grad_target(bi).as<scalar_t>().data(), m, n, k);
            }
        });
    };
    return emit(std::move(out), {ai, bi}, std::move(bw), "matmul_nt");
}

Value Tape::add(Value av, Value bv) {
    const int32_t ai = require(av), bi = require(bv);
    const Tensor &a = val_of(ai), &b = val_of(bi);
    require_same_shape(a, b, "add");
    Tensor out(a.shape(), dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto ap = a.as<scalar_t>();
        auto bp = b.as<scalar_t>();
        auto op = out.as<scalar_t>();
        for (size_t i = 0; i < op.size(); ++i) op[i] = ap[i] + bp[i];
    });
    auto bw = [ai, bi](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        if (t.nodes_[static_cast<size_t>(ai)].requires_grad) t.accumulate_grad(ai, gy);
        if (t.nodes_[static_cast<size_t>(bi)].requires_grad) t.accumulate_grad(bi, gy);
    };
    return emit(std::move(out), {ai, bi}, std::move(bw), "add");
}

Value Tape::mul(Value av, Value bv) {
    const int32_t ai = require(av), bi = require(bv);
    const Tensor &a = val_of(ai), &b = val_of(bi);
    require_same_shape(a, b, "mul");
    Tensor out(a.shape(), dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto ap = a.as<scalar_t>();
        auto bp = b.as<scalar_t>();
        auto op = out.as<scalar_t>();
        for (size_t i = 0; i < op.size(); ++i) op[i] = ap[i] * bp[i];
    });
    auto bw = [ai, bi](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto gyp = gy.as<scalar_t>();
            if (t.nodes_[static_cast<size_t>(ai)].requires_grad) {
                auto ga = t.grad_target(ai).as<scalar_t>();
                auto bp = t.val_of(bi).as<scalar_t>();
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += gyp[i] * bp[i];
            }
            if (t.nodes_[static_cast<size_t>(bi)].requires_grad) {
                auto gb = t.grad_target(bi).as<scalar_t>();
                auto ap = t.val_of(ai).as<scalar_t>();
                for (size_t i = 0; i < gb.size(); ++i) gb[i] += gyp[i] * ap[i];
            }
        });
    };
    return emit(std::move(out), {ai, bi}, std::move(bw), "mul");
}

Value Tape::add_bias(Value av, Value bv) {
    const int32_t ai = require(av), bi = require(bv);
    const Tensor &a = val_of(ai), &b = val_of(bi);
    if (a.rank() != 2 || b.rank() != 1 || a.cols() != b.dim(0))
        throw ShapeError("add_bias: expected [m,n] + [n]");
    const int64_t m = a.rows(), n = a.cols();
    Tensor out({m, n}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto ap = a.as<scalar_t>();
        auto bp = b.as<scalar_t>();
        auto op = out.as<scalar_t>();
        for (int64_t i = 0; i < m; ++i)
            for (int64_t j = 0; j < n; ++j)
                op[static_cast<size_t>(i * n + j)] = ap[static_cast<size_t>(i * n + j)] + bp[static_cast<size_t>(j)];
    });
    auto bw = [ai, bi, m, n](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        if (t.nodes_[static_cast<size_t>(ai)].requires_grad) t.accumulate_grad(ai, gy);
        if (t.nodes_[static_cast<size_t>(bi)].requires_grad) {
            MOIIE_DISPATCH(t.dtype_, {
                auto gb = t.grad_target(bi).as<scalar_t>();
                auto gyp = gy.as<scalar_t>();
                for (int64_t i = 0; i < m; ++i)
                    for (int64_t j = 0; j < n; ++j) gb[static_cast<size_t>(j)] += gyp[static_cast<size_t>(i * n + j)];
            });
        }
    };
    return emit(std::move(out), {ai, bi}, std::move(bw), "add_bias");
}

Value Tape::scale(Value av, double c) {
    const int32_t ai = require(av);
    const Tensor& a = val_of(ai);
    Tensor out(a.shape(), dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto ap = a.as<scalar_t>();
        auto op = out.as<scalar_t>();
        const scalar_t cv = static_cast<scalar_t>(c);
        for (size_t i = 0; i < op.size(); ++i) op[i] = ap[i] * cv;
    });
    auto bw = [ai, c](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto ga = t.grad_target(ai).as<scalar_t>();
            auto gyp = gy.as<scalar_t>();
            const scalar_t cv = static_cast<scalar_t>(c);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += gyp[i] * cv;
        });
    };
    return emit(std::move(out), {ai}, std::move(bw), "scale");
}

Value Tape::scale_by(Value av, Value sv) {
    const int32_t ai = require(av), si = require(sv);
    const Tensor &a = val_of(ai), &s = val_of(si);
    if (s.numel() != 1) throw ShapeError("scale_by: scale must be scalar");
    Tensor out(a.shape(), dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto ap = a.as<scalar_t>();
        auto op = out.as<scalar_t>();
        const scalar_t cv = static_cast<scalar_t>(s.item());
        for (size_t i = 0; i < op.size(); ++i) op[i] = ap[i] * cv;
    });
    auto bw = [ai, si](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto gyp = gy.as<scalar_t>();
            if (t.nodes_[static_cast<size_t>(ai)].requires_grad) {
                auto ga = t.grad_target(ai).as<scalar_t>();
                const scalar_t cv = static_cast<scalar_t>(t.val_of(si).item());
                for (size_t i = 0; i < ga.size(); ++i) ga[i] += gyp[i] * cv;
            }
            if (t.nodes_[static_cast<size_t>(si)].requires_grad) {
                auto ap = t.val_of(ai).as<scalar_t>();
                double acc = 0;
                for (size_t i = 0; i < ap.size(); ++i) acc += static_cast<double>(gyp[i]) * static_cast<double>(ap[i]);
                auto gs = t.grad_target(si).as<scalar_t>();
                gs[0] += static_cast<scalar_t>(acc);
            }
        });
    };
    return emit(std::move(out), {ai, si}, std::move(bw), "scale_by");
}

Value Tape::gelu(Value av) {
    const int32_t ai = require(av);
    const Tensor& a = val_of(ai);
    Tensor out(a.shape(), dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto ap = a.as<scalar_t>();
        auto op = out.as<scalar_t>();
        for (size_t i = 0; i < op.size(); ++i) op[i] = kernels::gelu_fwd(ap[i]);
    });
    auto bw = [ai](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto ga = t.grad_target(ai).as<scalar_t>();
            auto ap = t.val_of(ai).as<scalar_t>();
            auto gyp = gy.as<scalar_t>();
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += gyp[i] * kernels::gelu_bwd(ap[i]);
        });
    };
    return emit(std::move(out), {ai}, std::move(bw), "gelu");
}

Value Tape::rms_norm(Value av, Value gv, double eps) {
    const int32_t ai = require(av), gi = require(gv);
    const Tensor &a = val_of(ai), &g = val_of(gi);
    if (a.rank() != 2 || g.rank() != 1 || a.cols() != g.dim(0))
        throw ShapeError("rms_norm: expected [m,d] with gain [d]");
    const int64_t m = a.rows(), d = a.cols();
    Tensor out({m, d}, dtype_);
    Tensor inv_rms({m}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto ap = a.as<scalar_t>();
        auto gp = g.as<scalar_t>();
        auto op = out.as<scalar_t>();
        auto ip = inv_rms.as<scalar_t>();
        for (int64_t r = 0; r < m; ++r) {
            const scalar_t* x = ap.data() + r * d;
            double ss = 0;
            for (int64_t j = 0; j < d; ++j) ss += static_cast<double>(x[j]) * static_cast<double>(x[j]);
            const scalar_t inv = static_cast<scalar_t>(1.0 / std::sqrt(ss / static_cast<double>(d) + eps));
            ip[static_cast<size_t>(r)] = inv;
            scalar_t* y = op.data() + r * d;
            for (int64_t j = 0; j < d; ++j) y[j] = gp[static_cast<size_t>(j)] * x[j] * inv;
        }
    });
    auto bw = [ai, gi, m, d, inv_rms = std::move(inv_rms)](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto gyp = gy.as<scalar_t>();
            auto ap = t.val_of(ai).as<scalar_t>();
            auto gp = t.val_of(gi).as<scalar_t>();
            auto ip = inv_rms.as<scalar_t>();
            const bool need_a = t.nodes_[static_cast<size_t>(ai)].requires_grad;
            const bool need_g = t.nodes_[static_cast<size_t>(gi)].requires_grad;
            scalar_t* ga = need_a ? t.grad_target(ai).as<scalar_t>().data() : nullptr;
            scalar_t* gg = need_g ? t.grad_target(gi).as<scalar_t>().data() : nullptr;
            for (int64_t r = 0; r < m; ++r) {
                const scalar_t* x = ap.data() + r * d;
                const scalar_t* dy = gyp.data() + r * d;
                const scalar_t inv = ip[static_cast<size_t>(r)];
                if (need_g)
                    for (int64_t j = 0; j < d; ++j) gg[j] += dy[j] * x[j] * inv;
                if (need_a) {
                    double dot = 0;
                    for (int64_t j = 0; j < d; ++j)
                        dot += static_cast<double>(dy[j]) * static_cast<double>(gp[static_cast<size_t>(j)]) *
                               static_cast<double>(x[j]);
                    const scalar_t coef =
                        static_cast<scalar_t>(dot * static_cast<double>(inv) * static_cast<double>(inv) *
                                              static_cast<double>(inv) / static_cast<double>(d));
                    scalar_t* dx = ga + r * d;
                    for (int64_t j = 0; j < d; ++j)
                        dx[j] += dy[j] * gp[static_cast<size_t>(j)] * inv - x[j] * coef;
                }
            }
        });
    };
    return emit(std::move(out), {ai, gi}, std::move(bw), "rms_norm");
}

Value Tape::embedding(Value tv, std::vector<int32_t> ids) {
    const int32_t ti = require(tv);
    const Tensor& table = val_of(ti);
    if (table.rank() != 2) throw ShapeError("embedding: table must be rank 2");
    const int64_t V = table.rows(), d = table.cols();
    for (int32_t id : ids)
        if (id < 0 || id >= V)
            throw ShapeError("embedding: id " + std::to_string(id) + " out of range [0," + std::to_string(V) + ")");
    const int64_t n = static_cast<int64_t>(ids.size());
    Tensor out({n, d}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto tp = table.as<scalar_t>();
        auto op = out.as<scalar_t>();
        for (int64_t i = 0; i < n; ++i)
            std::memcpy(op.data() + i * d, tp.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d,
                        static_cast<size_t>(d) * sizeof(scalar_t));
    });
    auto bw = [ti, d, n, ids = std::move(ids)](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto gt = t.grad_target(ti).as<scalar_t>();
            auto gyp = gy.as<scalar_t>();
            for (int64_t i = 0; i < n; ++i) {
                scalar_t* dst = gt.data() + static_cast<int64_t>(ids[static_cast<size_t>(i)]) * d;
                const scalar_t* src = gyp.data() + i * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    };
    return emit(std::move(out), {ti}, std::move(bw), "embedding");
}

Value Tape::slice_rows(Value av, int64_t begin, int64_t end) {
    const int32_t ai = require(av);
    const Tensor& a = val_of(ai);
    if (a.rank() != 2 || begin < 0 || end > a.rows() || begin > end)
        throw ShapeError("slice_rows: bad range");
    const int64_t d = a.cols(), n = end - begin;
    Tensor out({n, d}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        std::memcpy(out.as<scalar_t>().data(), a.as<scalar_t>().data() + begin * d,
                    static_cast<size_t>(n * d) * sizeof(scalar_t));
    });
    auto bw = [ai, begin, n, d](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto ga = t.grad_target(ai).as<scalar_t>();
            auto gyp = gy.as<scalar_t>();
            for (int64_t i = 0; i < n * d; ++i) ga[static_cast<size_t>(begin * d + i)] += gyp[static_cast<size_t>(i)];
        });
    };
    return emit(std::move(out), {ai}, std::move(bw), "slice_rows");
}

Value Tape::concat_rows(const std::vector<Value>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: no inputs");
    std::vector<int32_t> ids;
    int64_t total = 0, d = -1;
    for (Value p : parts) {
        const int32_t i = require(p);
        const Tensor& tns = val_of(i);
        if (tns.rank() != 2) throw ShapeError("concat_rows: inputs must be rank 2");
        if (d < 0) d = tns.cols();
        if (tns.cols() != d) throw ShapeError("concat_rows: column mismatch");
        total += tns.rows();
        ids.push_back(i);
    }
    Tensor out({total, d}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto op = out.as<scalar_t>();
        int64_t off = 0;
        for (int32_t i : ids) {
            const Tensor& tns = val_of(i);
            std::memcpy(op.data() + off * d, tns.as<scalar_t>().data(),
                        static_cast<size_t>(tns.numel()) * sizeof(scalar_t));
            off += tns.rows();
        }
    });
    auto bw = [ids, d](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto gyp = gy.as<scalar_t>();
            int64_t off = 0;
            for (int32_t i : ids) {
                const int64_t rows = t.val_of(i).rows();
                if (t.nodes_[static_cast<size_t>(i)].requires_grad) {
                    auto gi = t.grad_target(i).as<scalar_t>();
                    for (int64_t e = 0; e < rows * d; ++e) gi[static_cast<size_t>(e)] += gyp[static_cast<size_t>(off * d + e)];
                }
                off += rows;
            }
        });
    };
    return emit(std::move(out), std::move(ids), std::move(bw), "concat_rows");
}

Value Tape::gather_rows(Value av, std::vector<int32_t> rows) {
    const int32_t ai = require(av);
    const Tensor& a = val_of(ai);
    if (a.rank() != 2) throw ShapeError("gather_rows: input must be rank 2");
    const int64_t d = a.cols(), m = a.rows();
    for (int32_t r : rows)
        if (r < 0 || r >= m) throw ShapeError("gather_rows: row index out of range");
    const int64_t n = static_cast<int64_t>(rows.size());
    Tensor out({n, d}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto ap = a.as<scalar_t>();
        auto op = out.as<scalar_t>();
        for (int64_t i = 0; i < n; ++i)
            std::memcpy(op.data() + i * d, ap.data() + static_cast<int64_t>(rows[static_cast<size_t>(i)]) * d,
                        static_cast<size_t>(d) * sizeof(scalar_t));
    });
    auto bw = [ai, d, n, rows = std::move(rows)](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto ga = t.grad_target(ai).as<scalar_t>();
            auto gyp = gy.as<scalar_t>();
            for (int64_t i = 0; i < n; ++i) {
                scalar_t* dst = ga.data() + static_cast<int64_t>(rows[static_cast<size_t>(i)]) * d;
                const scalar_t* src = gyp.data() + i * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    };
    return emit(std::move(out), {ai}, std::move(bw), "gather_rows");
}

Value Tape::scatter_rows(Value sv, std::vector<int32_t> dst_rows, int64_t total_rows) {
    const int32_t si = require(sv);
    const Tensor& s = val_of(si);
    if (s.rank() != 2 || static_cast<int64_t>(dst_rows.size()) != s.rows())
        throw ShapeError("scatter_rows: need one destination per source row");
    for (int32_t r : dst_rows)
        if (r < 0 || r >= total_rows) throw ShapeError("scatter_rows: destination out of range");
    const int64_t n = s.rows(), d = s.cols();
    Tensor out = Tensor::zeros({total_rows, d}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto sp = s.as<scalar_t>();
        auto op = out.as<scalar_t>();
        for (int64_t i = 0; i < n; ++i) {
            scalar_t* dst = op.data() + static_cast<int64_t>(dst_rows[static_cast<size_t>(i)]) * d;
            const scalar_t* src = sp.data() + i * d;
            for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    auto bw = [si, n, d, dst_rows = std::move(dst_rows)](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto gs = t.grad_target(si).as<scalar_t>();
            auto gyp = gy.as<scalar_t>();
            for (int64_t i = 0; i < n; ++i) {
                const scalar_t* src = gyp.data() + static_cast<int64_t>(dst_rows[static_cast<size_t>(i)]) * d;
                scalar_t* dst = gs.data() + i * d;
                for (int64_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    };
    return emit(std::move(out), {si}, std::move(bw), "scatter_rows");
}

Value Tape::scatter_rows_scaled(Value sv, Value wv, std::vector<int32_t> dst_rows, int64_t total_rows) {
    const int32_t si = require(sv), wi = require(wv);
    const Tensor &s = val_of(si), &w = val_of(wi);
    if (s.rank() != 2 || w.rank() != 1 || w.dim(0) != s.rows() ||
        static_cast<int64_t>(dst_rows.size()) != s.rows())
        throw ShapeError("scatter_rows_scaled: need [n,d] source, [n] weights, n destinations");
    for (int32_t r : dst_rows)
        if (r < 0 || r >= total_rows) throw ShapeError("scatter_rows_scaled: destination out of range");
    const int64_t n = s.rows(), d = s.cols();
    Tensor out = Tensor::zeros({total_rows, d}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto sp = s.as<scalar_t>();
        auto wp = w.as<scalar_t>();
        auto op = out.as<scalar_t>();
        for (int64_t i = 0; i < n; ++i) {
            scalar_t* dst = op.data() + static_cast<int64_t>(dst_rows[static_cast<size_t>(i)]) * d;
            const scalar_t* src = sp.data() + i * d;
            const scalar_t wv_ = wp[static_cast<size_t>(i)];
            for (int64_t j = 0; j < d; ++j) dst[j] += wv_ * src[j];
        }
    });
    auto bw = [si, wi, n, d, dst_rows = std::move(dst_rows)](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto gyp = gy.as<scalar_t>();
            auto sp = t.val_of(si).as<scalar_t>();
            auto wp = t.val_of(wi).as<scalar_t>();
            const bool need_s = t.nodes_[static_cast<size_t>(si)].requires_grad;
            const bool need_w = t.nodes_[static_cast<size_t>(wi)].requires_grad;
            scalar_t* gs = need_s ? t.grad_target(si).as<scalar_t>().data() : nullptr;
            scalar_t* gw = need_w ? t.grad_target(wi).as<scalar_t>().data() : nullptr;
            for (int64_t i = 0; i < n; ++i) {
                const scalar_t* gr = gyp.data() + static_cast<int64_t>(dst_rows[static_cast<size_t>(i)]) * d;
                if (need_s) {
                    scalar_t* dst = gs + i * d;
                    const scalar_t wv_ = wp[static_cast<size_t>(i)];
                    for (int64_t j = 0; j < d; ++j) dst[j] += wv_ * gr[j];
                }
                if (need_w) {
                    const scalar_t* src = sp.data() + i * d;
                    double acc = 0;
                    for (int64_t j = 0; j < d; ++j) acc += static_cast<double>(gr[j]) * static_cast<double>(src[j]);
                    gw[i] += static_cast<scalar_t>(acc);
                }
            }
        });
    };
    return emit(std::move(out), {si, wi}, std::move(bw), "scatter_rows_scaled");
}

Value Tape::gather_per_row(Value av, std::vector<int32_t> idx, int64_t k) {
    const int32_t ai = require(av);
    const Tensor& a = val_of(ai);
    if (a.rank() != 2) throw ShapeError("gather_per_row: input must be rank 2");
    const int64_t n = a.rows(), m = a.cols();
    if (static_cast<int64_t>(idx.size()) != n * k) throw ShapeError("gather_per_row: index count mismatch");
    for (int32_t c : idx)
        if (c < 0 || c >= m) throw ShapeError("gather_per_row: column index out of range");
    Tensor out({n, k}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto ap = a.as<scalar_t>();
        auto op = out.as<scalar_t>();
        for (int64_t r = 0; r < n; ++r)
            for (int64_t j = 0; j < k; ++j)
                op[static_cast<size_t>(r * k + j)] =
                    ap[static_cast<size_t>(r * m + idx[static_cast<size_t>(r * k + j)])];
    });
    auto bw = [ai, n, m, k, idx = std::move(idx)](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto ga = t.grad_target(ai).as<scalar_t>();
            auto gyp = gy.as<scalar_t>();
            for (int64_t r = 0; r < n; ++r)
                for (int64_t j = 0; j < k; ++j)
                    ga[static_cast<size_t>(r * m + idx[static_cast<size_t>(r * k + j)])] +=
                        gyp[static_cast<size_t>(r * k + j)];
        });
    };
    return emit(std::move(out), {ai}, std::move(bw), "gather_per_row");
}

Value Tape::gather_elems(Value av, std::vector<int64_t> flat) {
    const int32_t ai = require(av);
    const Tensor& a = val_of(ai);
    const int64_t total = a.numel();
    for (int64_t f : flat)
        if (f < 0 || f >= total) throw ShapeError("gather_elems: flat index out of range");
    const int64_t n = static_cast<int64_t>(flat.size());
    Tensor out({n}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto ap = a.as<scalar_t>();
        auto op = out.as<scalar_t>();
        for (int64_t i = 0; i < n; ++i) op[static_cast<size_t>(i)] = ap[static_cast<size_t>(flat[static_cast<size_t>(i)])];
    });
    auto bw = [ai, n, flat = std::move(flat)](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto ga = t.grad_target(ai).as<scalar_t>();
            auto gyp = gy.as<scalar_t>();
            for (int64_t i = 0; i < n; ++i)
                ga[static_cast<size_t>(flat[static_cast<size_t>(i)])] += gyp[static_cast<size_t>(i)];
        });
    };
    return emit(std::move(out), {ai}, std::move(bw), "gather_elems");
}

Value Tape::softmax(Value av, int axis) {
    const int32_t ai = require(av);
    const Tensor& a = val_of(ai);
    a.check_finite("softmax input");
    if (a.rank() < 1 || a.rank() > 2) throw ShapeError("softmax: rank must be 1 or 2");
    if (axis < 0 || axis >= a.rank()) throw ShapeError("softmax: invalid axis");
    if (a.dim(axis) == 0) throw ShapeError("softmax: empty axis");
    const bool rowwise = (a.rank() == 1) || axis == 1;
    const int64_t outer = a.rank() == 1 ? 1 : (rowwise ? a.dim(0) : a.dim(1));
    const int64_t inner = a.rank() == 1 ? a.dim(0) : (rowwise ? a.dim(1) : a.dim(0));
    Tensor out(a.shape(), dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto ap = a.as<scalar_t>();
        auto op = out.as<scalar_t>();
        if (rowwise) {
            for (int64_t r = 0; r < outer; ++r)
                kernels::softmax_row(ap.data() + r * inner, op.data() + r * inner, inner);
        } else {
            // axis 0 of a rank-2 tensor: strided columns
            std::vector<scalar_t> col(static_cast<size_t>(inner)), res(static_cast<size_t>(inner));
            for (int64_t c = 0; c < outer; ++c) {
                for (int64_t r = 0; r < inner; ++r) col[static_cast<size_t>(r)] = ap[static_cast<size_t>(r * outer + c)];
                kernels::softmax_row(col.data(), res.data(), inner);
                for (int64_t r = 0; r < inner; ++r) op[static_cast<size_t>(r * outer + c)] = res[static_cast<size_t>(r)];
            }
        }
    });
    auto bw = [ai, rowwise, outer, inner](Tape& t, int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        const Tensor& y = t.val_of(self);
        MOIIE_DISPATCH(t.dtype_, {
            auto ga = t.grad_target(ai).as<scalar_t>();
            auto gyp = gy.as<scalar_t>();
            auto yp = y.as<scalar_t>();
            auto at = [&](int64_t slice, int64_t pos) {
                return rowwise ? slice * inner + pos : pos * outer + slice;
            };
            for (int64_t s = 0; s < outer; ++s) {
                double dot = 0;
                for (int64_t j = 0; j < inner; ++j) {
                    const size_t q = static_cast<size_t>(at(s, j));
                    dot += static_cast<double>(gyp[q]) * static_cast<double>(yp[q]);
                }
                for (int64_t j = 0; j < inner; ++j) {
                    const size_t q = static_cast<size_t>(at(s, j));
                    ga[q] += (gyp[q] - static_cast<scalar_t>(dot)) * yp[q];
                }
            }
        });
    };
    return emit(std::move(out), {ai}, std::move(bw), "softmax");
}

Value Tape::sum(Value av) {
    const int32_t ai = require(av);
    const Tensor& a = val_of(ai);
    double acc = 0;
    MOIIE_DISPATCH(dtype_, {
        for (scalar_t v : a.as<scalar_t>()) acc += static_cast<double>(v);
    });
    Tensor out = Tensor::scalar(acc, dtype_);
    auto bw = [ai](Tape& t, int32_t self) {
        const double g = t.grads_[static_cast<size_t>(self)].item();
        MOIIE_DISPATCH(t.dtype_, {
            auto ga = t.grad_target(ai).as<scalar_t>();
            const scalar_t gv = static_cast<scalar_t>(g);
            for (size_t i = 0; i < ga.size(); ++i) ga[i] += gv;
        });
    };
    return emit(std::move(out), {ai}, std::move(bw), "sum");
}

Value Tape::mean(Value av) {
    const int32_t ai = require(av);
    const Tensor& a = val_of(ai);
    if (a.numel() == 0) throw ShapeError("mean: empty tensor");
    return scale(sum(av), 1.0 / static_cast<double>(a.numel()));
}

Value Tape::cross_entropy(Value lv, std::vector<int32_t> targets, std::vector<uint8_t> mask) {
    const int32_t li = require(lv);
    const Tensor& logits = val_of(li);
    if (logits.rank() != 2) throw ShapeError("cross_entropy: logits must be [n,vocab]");
    const int64_t n = logits.rows(), V = logits.cols();
    if (static_cast<int64_t>(targets.size()) != n || static_cast<int64_t>(mask.size()) != n)
        throw ShapeError("cross_entropy: targets/mask length mismatch");
    int64_t m_count = 0;
    for (int64_t i = 0; i < n; ++i) {
        if (!mask[static_cast<size_t>(i)]) continue;
        ++m_count;
        const int32_t tgt = targets[static_cast<size_t>(i)];
        if (tgt < 0 || tgt >= V)
            throw NumericError("cross_entropy: target id " + std::to_string(tgt) + " out of range for vocab " +
                               std::to_string(V));
    }
    if (m_count == 0) throw NumericError("cross_entropy: all positions masked out");
    Tensor probs({n, V}, dtype_);
    double loss = 0;
    MOIIE_DISPATCH(dtype_, {
        auto lp = logits.as<scalar_t>();
        auto pp = probs.as<scalar_t>();
        for (int64_t i = 0; i < n; ++i) {
            if (!mask[static_cast<size_t>(i)]) continue;
            const scalar_t* row = lp.data() + i * V;
            scalar_t* prow = pp.data() + i * V;
            kernels::softmax_row(row, prow, V);
            // -log p[target], computed from the stable log-sum-exp form
            double mx = static_cast<double>(row[0]);
            for (int64_t j = 1; j < V; ++j) mx = std::max(mx, static_cast<double>(row[j]));
            double se = 0;
            for (int64_t j = 0; j < V; ++j) se += std::exp(static_cast<double>(row[j]) - mx);
            loss += mx + std::log(se) - static_cast<double>(row[targets[static_cast<size_t>(i)]]);
        }
    });
    loss /= static_cast<double>(m_count);
    Tensor out = Tensor::scalar(loss, dtype_);
    auto bw = [li, n, V, m_count, targets = std::move(targets), mask = std::move(mask),
               probs = std::move(probs)](Tape& t, int32_t self) {
        const double g = t.grads_[static_cast<size_t>(self)].item();
        MOIIE_DISPATCH(t.dtype_, {
            auto gl = t.grad_target(li).as<scalar_t>();
            auto pp = probs.as<scalar_t>();
            const scalar_t coef = static_cast<scalar_t>(g / static_cast<double>(m_count));
            for (int64_t i = 0; i < n; ++i) {
                if (!mask[static_cast<size_t>(i)]) continue;
                scalar_t* grow = gl.data() + i * V;
                const scalar_t* prow = pp.data() + i * V;
                for (int64_t j = 0; j < V; ++j) grow[j] += coef * prow[j];
                grow[targets[static_cast<size_t>(i)]] -= coef;
            }
        });
    };
    return emit(std::move(out), {li}, std::move(bw), "cross_entropy");
}

Value Tape::attention(Value qv, Value kv, Value vv, int n_heads, int64_t batch, int64_t seq) {
    const int32_t qi = require(qv), ki = require(kv), vi = require(vv);
    const Tensor &q = val_of(qi), &k = val_of(ki), &v = val_of(vi);
    require_same_shape(q, k, "attention");
    require_same_shape(q, v, "attention");
    if (q.rank() != 2 || q.rows() != batch * seq) throw ShapeError("attention: expected [batch*seq, d]");
    const int64_t d = q.cols();
    if (n_heads <= 0 || d % n_heads != 0) throw ShapeError("attention: d must divide by n_heads");
    const int64_t dh = d / n_heads;
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor out = Tensor::zeros({batch * seq, d}, dtype_);
    Tensor probs = Tensor::zeros({batch * n_heads * seq * seq}, dtype_);
    MOIIE_DISPATCH(dtype_, {
        auto qp = q.as<scalar_t>();
        auto kp = k.as<scalar_t>();
        auto vp = v.as<scalar_t>();
        auto op = out.as<scalar_t>();
        auto pp = probs.as<scalar_t>();
        std::vector<scalar_t> srow(static_cast<size_t>(seq));
        for (int64_t b = 0; b < batch; ++b) {
            for (int64_t h = 0; h < n_heads; ++h) {
                const int64_t hoff = h * dh;
                scalar_t* pbase = pp.data() + ((b * n_heads + h) * seq) * seq;
                for (int64_t tq = 0; tq < seq; ++tq) {
                    const scalar_t* qrow = qp.data() + (b * seq + tq) * d + hoff;
                    for (int64_t tk = 0; tk <= tq; ++tk) {
                        const scalar_t* krow = kp.data() + (b * seq + tk) * d + hoff;
                        scalar_t acc = 0;
                        for (int64_t j = 0; j < dh; ++j) acc += qrow[j] * krow[j];
                        srow[static_cast<size_t>(tk)] = acc * static_cast<scalar_t>(scale);
                    }
                    kernels::softmax_row(srow.data(), pbase + tq * seq, tq + 1);
                    for (int64_t tk = static_cast<int64_t>(tq) + 1; tk < seq; ++tk)
                        pbase[tq * seq + tk] = 0;
                    scalar_t* orow = op.data() + (b * seq + tq) * d + hoff;
                    for (int64_t tk = 0; tk <= tq; ++tk) {
                        const scalar_t pw = pbase[tq * seq + tk];
                        const scalar_t* vrow = vp.data() + (b * seq + tk) * d + hoff;
                        for (int64_t j = 0; j < dh; ++j) orow[j] += pw * vrow[j];
                    }
                }
            }
        }
    });
    auto bw = [qi, ki, vi, n_heads, batch, seq, d, dh, scale, probs = std::move(probs)](Tape& t,
                                                                                        int32_t self) {
        const Tensor& gy = t.grads_[static_cast<size_t>(self)];
        MOIIE_DISPATCH(t.dtype_, {
            auto gyp = gy.as<scalar_t>();
            auto qp = t.val_of(qi).as<scalar_t>();
            auto kp = t.val_of(ki).as<scalar_t>();
            auto vp = t.val_of(vi).as<scalar_t>();
            auto pp = probs.as<scalar_t>();
            scalar_t* gq = t.grad_target(qi).as<scalar_t>().data();
            scalar_t* gk = t.grad_target(ki).as<scalar_t>().data();
            scalar_t* gv = t.grad_target(vi).as<scalar_t>().data();
            std::vector<scalar_t> dp(static_cast<size_t>(seq)), ds(static_cast<size_t>(seq));
            for (int64_t b = 0; b < batch; ++b) {
                for (int64_t h = 0; h < n_heads; ++h) {
                    const int64_t hoff = h * dh;
                    const scalar_t* pbase = pp.data() + ((b * n_heads + h) * seq) * seq;
                    for (int64_t tq = 0; tq < seq; ++tq) {
                        const scalar_t* prow = pbase + tq * seq;
                        const scalar_t* dorow = gyp.data() + (b * seq + tq) * d + hoff;
                        // dV and dP
                        for (int64_t tk = 0; tk <= tq; ++tk) {
                            const scalar_t pw = prow[tk];
                            scalar_t* gvrow = gv + (b * seq + tk) * d + hoff;
                            const scalar_t* vrow = vp.data() + (b * seq + tk) * d + hoff;
                            scalar_t acc = 0;
                            for (int64_t j = 0; j < dh; ++j) {
                                gvrow[j] += pw * dorow[j];
                                acc += dorow[j] * vrow[j];
                            }
                            dp[static_cast<size_t>(tk)] = acc;
                        }
                        // dS = P ⊙ (dP − Σ dP⊙P)
                        double dot = 0;
                        for (int64_t tk = 0; tk <= tq; ++tk)
                            dot += static_cast<double>(dp[static_cast<size_t>(tk)]) *
                                   static_cast<double>(prow[tk]);
                        for (int64_t tk = 0; tk <= tq; ++tk)
                            ds[static_cast<size_t>(tk)] =
                                prow[tk] * (dp[static_cast<size_t>(tk)] - static_cast<scalar_t>(dot));
                        // dQ and dK
                        scalar_t* gqrow = gq + (b * seq + tq) * d + hoff;
                        const scalar_t* qrow = qp.data() + (b * seq + tq) * d + hoff;
                        for (int64_t tk = 0; tk <= tq; ++tk) {
                            const scalar_t dsv = ds[static_cast<size_t>(tk)] * static_cast<scalar_t>(scale);
                            const scalar_t* krow = kp.data() + (b * seq + tk) * d + hoff;
                            scalar_t* gkrow = gk + (b * seq + tk) * d + hoff;
                            for (int64_t j = 0; j < dh; ++j) {
                                gqrow[j] += dsv * krow[j];
                                gkrow[j] += dsv * qrow[j];
                            }
                        }
                    }
                }
            }
        });
    };
    return emit(std::move(out), {qi, ki, vi}, std::move(bw), "attention");
}

void Tape::backward(Value loss) {
    const int32_t li = require(loss);
    if (val_of(li).numel() != 1) throw NumericError("backward: loss must be a scalar");
    if (ran_backward_) throw NumericError("backward: tape already replayed");
    ran_backward_ = true;
    grad_target(li).fill(1.0);
    for (int32_t i = li; i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.requires_grad || !grad_present(i)) continue;
        if (n.backward_fn) n.backward_fn(*this, i);
    }
    // Fold parameter-leaf gradients into their external tensors.
    for (size_t i = 0; i < nodes_.size(); ++i) {
        Node& n = nodes_[i];
        if (!n.ext || !n.requires_grad || !grad_present(static_cast<int32_t>(i))) continue;
        n.ext->ensure_grad();
        const Tensor& g = grads_[i];
        MOIIE_DISPATCH(dtype_, {
            auto dst = n.ext->grad_as<scalar_t>();
            auto src = g.as<scalar_t>();
            for (size_t j = 0; j < dst.size(); ++j) dst[j] += src[j];
        });
    }
}

Tensor Tape::grad(Value v) const {
    const int32_t id = require(v);
    if (grad_present(id)) return grads_[static_cast<size_t>(id)];
    return Tensor::zeros(val_of(id).shape(), val_of(id).dtype());
}

void Tape::note_selection(uint64_t h) { selection_sig_ = fnv_mix(selection_sig_, h); }

}  // namespace moiie
