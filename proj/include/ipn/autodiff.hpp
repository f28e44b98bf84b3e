#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "ipn/errors.hpp"
#include "ipn/tensor.hpp"

namespace ipn {

// Handle to a node on a Tape.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Zero-norm handling for cosine similarities. `guarded` adds a small delta to
// the denominator (training path); `strict` keeps the bare denominator and
// raises on zero-norm inputs (test/oracle path).
enum class CosineMode { guarded, strict };

// Reverse-mode differentiation tape over dense tensors. Nodes are appended in
// execution order, so the record is topologically sorted by construction and
// a reverse sweep visits every node after all of its consumers. Gradients
// accumulate additively across multiple uses of a node.
//
// A Tape and its tensors are confined to a single thread.
template <typename Real>
class Tape {
public:
    explicit Tape(CosineMode mode = CosineMode::guarded) : cosine_mode_(mode) {
        nodes_.reserve(256);
    }

    CosineMode cosine_mode() const { return cosine_mode_; }

    // -------------------------------------------------------------- leaves

    Var constant(Tensor<Real> v) { return push(std::move(v), false, "constant", {}); }

    Var param(Tensor<Real> v) { return push(std::move(v), true, "param", {}); }

    // ------------------------------------------------------ elementwise ops

    Var add(Var a, Var b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        require_same_shape(ta, tb, "add");
        Tensor<Real> out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out.values[i] += tb.values[i];
        return push(std::move(out), needs_grad({a, b}), "add", [a, b](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            t.accumulate(a, [&](Tensor<Real>& da) {
                for (std::size_t i = 0; i < g.size(); ++i) da.values[i] += g.values[i];
            });
            t.accumulate(b, [&](Tensor<Real>& db) {
                for (std::size_t i = 0; i < g.size(); ++i) db.values[i] += g.values[i];
            });
        });
    }

    Var sub(Var a, Var b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        require_same_shape(ta, tb, "sub");
        Tensor<Real> out = ta;
        for (std::size_t i = 0; i < out.size(); ++i) out.values[i] -= tb.values[i];
        return push(std::move(out), needs_grad({a, b}), "sub", [a, b](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            t.accumulate(a, [&](Tensor<Real>& da) {
                for (std::size_t i = 0; i < g.size(); ++i) da.values[i] += g.values[i];
            });
            t.accumulate(b, [&](Tensor<Real>& db) {
                for (std::size_t i = 0; i < g.size(); ++i) db.values[i] -= g.values[i];
            });
        });
    }

    Var scale(Var a, Real c) {
        Tensor<Real> out = val(a);
        for (Real& v : out.values) v *= c;
        return push(std::move(out), needs_grad({a}), "scale", [a, c](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            t.accumulate(a, [&](Tensor<Real>& da) {
                for (std::size_t i = 0; i < g.size(); ++i) da.values[i] += c * g.values[i];
            });
        });
    }

    Var relu(Var a) {
        Tensor<Real> out = val(a);
        for (Real& v : out.values) v = v > Real(0) ? v : Real(0);
        // subgradient at exactly 0 is defined as 0
        return push(std::move(out), needs_grad({a}), "relu", [a](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& x = t.val(a);
            t.accumulate(a, [&](Tensor<Real>& da) {
                for (std::size_t i = 0; i < g.size(); ++i) {
                    if (x.values[i] > Real(0)) da.values[i] += g.values[i];
                }
            });
        });
    }

    // M[r x c] + v[c], broadcast over rows.
    Var add_rowvec(Var m, Var v) {
        const auto& tm = val(m);
        const auto& tv = val(v);
        if (tm.rank() != 2 || tv.rank() != 1 || tm.shape[1] != tv.shape[0]) {
            throw DimensionError("add_rowvec: " + tm.shape_string() + " + " + tv.shape_string());
        }
        Tensor<Real> out = tm;
        const std::size_t r = tm.shape[0], c = tm.shape[1];
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < c; ++j) out.values[i * c + j] += tv.values[j];
        return push(std::move(out), needs_grad({m, v}), "add_rowvec", [m, v, r, c](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            t.accumulate(m, [&](Tensor<Real>& dm) {
                for (std::size_t i = 0; i < g.size(); ++i) dm.values[i] += g.values[i];
            });
            t.accumulate(v, [&](Tensor<Real>& dv) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j) dv.values[j] += g.values[i * c + j];
            });
        });
    }

    // vec[n] + scalar, broadcast.
    Var add_scalar(Var vec, Var s) {
        const auto& tv = val(vec);
        const auto& ts = val(s);
        if (ts.size() != 1) throw DimensionError("add_scalar: rhs must be scalar");
        Tensor<Real> out = tv;
        for (Real& x : out.values) x += ts.values[0];
        return push(std::move(out), needs_grad({vec, s}), "add_scalar", [vec, s](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            t.accumulate(vec, [&](Tensor<Real>& dv) {
                for (std::size_t i = 0; i < g.size(); ++i) dv.values[i] += g.values[i];
            });
            t.accumulate(s, [&](Tensor<Real>& ds) {
                Real total = 0;
                for (Real gv : g.values) total += gv;
                ds.values[0] += total;
            });
        });
    }

    // ---------------------------------------------------------- linear maps

    // weight[n_out x n_in] * x[n_in] (+ bias[n_out])
    Var linear(Var x, Var weight, std::optional<Var> bias = std::nullopt) {
        Var y = matvec(weight, x);
        if (bias) y = add(y, *bias);
        return y;
    }

    Var matvec(Var m, Var v) {
        const auto& tm = val(m);
        const auto& tv = val(v);
        if (tm.rank() != 2 || tv.rank() != 1 || tm.shape[1] != tv.shape[0]) {
            throw DimensionError("matvec: " + tm.shape_string() + " * " + tv.shape_string());
        }
        const std::size_t r = tm.shape[0], c = tm.shape[1];
        Tensor<Real> out = Tensor<Real>::zeros({r});
        for (std::size_t i = 0; i < r; ++i) {
            Real acc = 0;
            for (std::size_t j = 0; j < c; ++j) acc += tm.values[i * c + j] * tv.values[j];
            out.values[i] = acc;
        }
        return push(std::move(out), needs_grad({m, v}), "matvec", [m, v, r, c](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& tm = t.val(m);
            const auto& tv = t.val(v);
            t.accumulate(m, [&](Tensor<Real>& dm) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        dm.values[i * c + j] += g.values[i] * tv.values[j];
            });
            t.accumulate(v, [&](Tensor<Real>& dv) {
                for (std::size_t i = 0; i < r; ++i)
                    for (std::size_t j = 0; j < c; ++j)
                        dv.values[j] += g.values[i] * tm.values[i * c + j];
            });
        });
    }

    // A[m x k] * B[k x n]
    Var matmul(Var a, Var b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[0]) {
            throw DimensionError("matmul: " + ta.shape_string() + " * " + tb.shape_string());
        }
        const std::size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[1];
        Tensor<Real> out = Tensor<Real>::zeros({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const Real av = ta.values[i * k + p];
                if (av == Real(0)) continue;
                for (std::size_t j = 0; j < n; ++j)
                    out.values[i * n + j] += av * tb.values[p * n + j];
            }
        return push(std::move(out), needs_grad({a, b}), "matmul", [a, b, m, k, n](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& ta = t.val(a);
            const auto& tb = t.val(b);
            t.accumulate(a, [&](Tensor<Real>& da) {
                // dA = G * B^T
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t p = 0; p < k; ++p) {
                        Real acc = 0;
                        for (std::size_t j = 0; j < n; ++j)
                            acc += g.values[i * n + j] * tb.values[p * n + j];
                        da.values[i * k + p] += acc;
                    }
            });
            t.accumulate(b, [&](Tensor<Real>& db) {
                // dB = A^T * G
                for (std::size_t p = 0; p < k; ++p)
                    for (std::size_t i = 0; i < m; ++i) {
                        const Real av = ta.values[i * k + p];
                        if (av == Real(0)) continue;
                        for (std::size_t j = 0; j < n; ++j)
                            db.values[p * n + j] += av * g.values[i * n + j];
                    }
            });
        });
    }

    // A[m x k] * B[n x k]^T
    Var matmul_nt(Var a, Var b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[1] != tb.shape[1]) {
            throw DimensionError("matmul_nt: " + ta.shape_string() + " * " + tb.shape_string() + "^T");
        }
        const std::size_t m = ta.shape[0], k = ta.shape[1], n = tb.shape[0];
        Tensor<Real> out = Tensor<Real>::zeros({m, n});
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                Real acc = 0;
                for (std::size_t p = 0; p < k; ++p)
                    acc += ta.values[i * k + p] * tb.values[j * k + p];
                out.values[i * n + j] = acc;
            }
        return push(std::move(out), needs_grad({a, b}), "matmul_nt", [a, b, m, k, n](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& ta = t.val(a);
            const auto& tb = t.val(b);
            t.accumulate(a, [&](Tensor<Real>& da) {
                // dA = G * B
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const Real gv = g.values[i * n + j];
                        if (gv == Real(0)) continue;
                        for (std::size_t p = 0; p < k; ++p)
                            da.values[i * k + p] += gv * tb.values[j * k + p];
                    }
            });
            t.accumulate(b, [&](Tensor<Real>& db) {
                // dB = G^T * A
                for (std::size_t j = 0; j < n; ++j)
                    for (std::size_t i = 0; i < m; ++i) {
                        const Real gv = g.values[i * n + j];
                        if (gv == Real(0)) continue;
                        for (std::size_t p = 0; p < k; ++p)
                            db.values[j * k + p] += gv * ta.values[i * k + p];
                    }
            });
        });
    }

    Var dot(Var a, Var b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        require_same_shape(ta, tb, "dot");
        Real acc = 0;
        for (std::size_t i = 0; i < ta.size(); ++i) acc += ta.values[i] * tb.values[i];
        return push(Tensor<Real>::scalar(acc), needs_grad({a, b}), "dot", [a, b](Tape& t, int self) {
            const Real g = t.grad_of(self).values[0];
            const auto& ta = t.val(a);
            const auto& tb = t.val(b);
            t.accumulate(a, [&](Tensor<Real>& da) {
                for (std::size_t i = 0; i < tb.size(); ++i) da.values[i] += g * tb.values[i];
            });
            t.accumulate(b, [&](Tensor<Real>& db) {
                for (std::size_t i = 0; i < ta.size(); ++i) db.values[i] += g * ta.values[i];
            });
        });
    }

    // ------------------------------------------------------- shape plumbing

    Var row(Var m, std::size_t i) {
        const auto& tm = val(m);
        if (tm.rank() != 2 || i >= tm.shape[0]) {
            throw DimensionError("row: index " + std::to_string(i) + " on " + tm.shape_string());
        }
        const std::size_t c = tm.shape[1];
        Tensor<Real> out = Tensor<Real>::zeros({c});
        std::copy_n(tm.values.begin() + static_cast<std::ptrdiff_t>(i * c), c, out.values.begin());
        return push(std::move(out), needs_grad({m}), "row", [m, i, c](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            t.accumulate(m, [&](Tensor<Real>& dm) {
                for (std::size_t j = 0; j < c; ++j) dm.values[i * c + j] += g.values[j];
            });
        });
    }

    // [A | B] column-wise; rows must match.
    Var concat_cols(Var a, Var b) {
        const auto& ta = val(a);
        const auto& tb = val(b);
        if (ta.rank() != 2 || tb.rank() != 2 || ta.shape[0] != tb.shape[0]) {
            throw DimensionError("concat_cols: " + ta.shape_string() + " | " + tb.shape_string());
        }
        const std::size_t r = ta.shape[0], ca = ta.shape[1], cb = tb.shape[1];
        Tensor<Real> out = Tensor<Real>::zeros({r, ca + cb});
        for (std::size_t i = 0; i < r; ++i) {
            for (std::size_t j = 0; j < ca; ++j) out.values[i * (ca + cb) + j] = ta.values[i * ca + j];
            for (std::size_t j = 0; j < cb; ++j)
                out.values[i * (ca + cb) + ca + j] = tb.values[i * cb + j];
        }
        return push(std::move(out), needs_grad({a, b}), "concat_cols",
                    [a, b, r, ca, cb](Tape& t, int self) {
                        const auto& g = t.grad_of(self);
                        t.accumulate(a, [&](Tensor<Real>& da) {
                            for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < ca; ++j)
                                    da.values[i * ca + j] += g.values[i * (ca + cb) + j];
                        });
                        t.accumulate(b, [&](Tensor<Real>& db) {
                            for (std::size_t i = 0; i < r; ++i)
                                for (std::size_t j = 0; j < cb; ++j)
                                    db.values[i * cb + j] += g.values[i * (ca + cb) + ca + j];
                        });
                    });
    }

    // ----------------------------------------------------------- reductions

    Var sum_all(Var a) {
        const auto& ta = val(a);
        Real acc = 0;
        for (Real v : ta.values) acc += v;
        return push(Tensor<Real>::scalar(acc), needs_grad({a}), "sum", [a](Tape& t, int self) {
            const Real g = t.grad_of(self).values[0];
            t.accumulate(a, [&](Tensor<Real>& da) {
                for (Real& v : da.values) v += g;
            });
        });
    }

    Var mean_all(Var a) {
        const auto& ta = val(a);
        if (ta.size() == 0) throw DimensionError("mean of empty tensor");
        return scale(sum_all(a), Real(1) / Real(ta.size()));
    }

    // Mean of scalar nodes.
    Var mean_of(const std::vector<Var>& xs) {
        if (xs.empty()) throw DimensionError("mean_of: empty list");
        for (Var x : xs) {
            if (val(x).size() != 1) throw ContractError("mean_of: inputs must be scalars");
        }
        Real acc = 0;
        for (Var x : xs) acc += val(x).values[0];
        const Real inv = Real(1) / Real(xs.size());
        bool rg = false;
        for (Var x : xs) rg = rg || requires_grad(x);
        std::vector<Var> captured = xs;
        return push(Tensor<Real>::scalar(acc * inv), rg, "mean_of",
                    [captured, inv](Tape& t, int self) {
                        const Real g = t.grad_of(self).values[0] * inv;
                        for (Var x : captured) {
                            t.accumulate(x, [&](Tensor<Real>& dx) { dx.values[0] += g; });
                        }
                    });
    }

    // -------------------------------------------------- similarity / softmax

    // <u, v> / (|u| |v| [+ delta])
    Var cosine(Var u, Var v) {
        const auto& tu = val(u);
        const auto& tv = val(v);
        require_same_shape(tu, tv, "cosine");
        const Real nu = norm2(tu);
        const Real nv = norm2(tv);
        check_cosine_norms(nu, nv);
        const Real denom = nu * nv + cosine_delta();
        Real g = 0;
        for (std::size_t i = 0; i < tu.size(); ++i) g += tu.values[i] * tv.values[i];
        const Real c = g / denom;
        return push(Tensor<Real>::scalar(c), needs_grad({u, v}), "cosine",
                    [u, v, nu, nv, denom, c](Tape& t, int self) {
                        const Real gg = t.grad_of(self).values[0];
                        const auto& tu = t.val(u);
                        const auto& tv = t.val(v);
                        const Real safe_nu = nu > Real(0) ? nu : Real(1);
                        const Real safe_nv = nv > Real(0) ? nv : Real(1);
                        t.accumulate(u, [&](Tensor<Real>& du) {
                            for (std::size_t i = 0; i < tu.size(); ++i)
                                du.values[i] += gg * (tv.values[i] / denom -
                                                      c * nv * tu.values[i] / (safe_nu * denom));
                        });
                        t.accumulate(v, [&](Tensor<Real>& dv) {
                            for (std::size_t i = 0; i < tv.size(); ++i)
                                dv.values[i] += gg * (tu.values[i] / denom -
                                                      c * nu * tv.values[i] / (safe_nv * denom));
                        });
                    });
    }

    // All-pairs cosine between rows of T[n x d]; out[n x n], symmetric.
    Var cosine_matrix(Var t_in) {
        const auto& tt = val(t_in);
        if (tt.rank() != 2) throw DimensionError("cosine_matrix: need matrix, got " + tt.shape_string());
        const std::size_t n = tt.shape[0], d = tt.shape[1];
        std::vector<Real> norms(n);
        for (std::size_t i = 0; i < n; ++i) {
            Real acc = 0;
            for (std::size_t p = 0; p < d; ++p) {
                const Real v = tt.values[i * d + p];
                acc += v * v;
            }
            norms[i] = std::sqrt(acc);
            if (cosine_mode_ == CosineMode::strict && norms[i] == Real(0)) {
                throw DegenerateInputError("cosine_matrix: zero-norm row " + std::to_string(i));
            }
        }
        const Real delta = cosine_delta();
        Tensor<Real> out = Tensor<Real>::zeros({n, n});
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < n; ++j) {
                Real g = 0;
                for (std::size_t p = 0; p < d; ++p)
                    g += tt.values[i * d + p] * tt.values[j * d + p];
                out.values[i * n + j] = g / (norms[i] * norms[j] + delta);
            }
        return push(std::move(out), needs_grad({t_in}), "cosine_matrix",
                    [t_in, n, d, norms, delta](Tape& t, int self) {
                        const auto& g = t.grad_of(self);
                        const auto& cv = t.val_of(self);
                        const auto& tt = t.val(t_in);
                        t.accumulate(t_in, [&](Tensor<Real>& dt) {
                            for (std::size_t i = 0; i < n; ++i)
                                for (std::size_t j = 0; j < n; ++j) {
                                    const Real gv = g.values[i * n + j];
                                    if (gv == Real(0)) continue;
                                    const Real den = norms[i] * norms[j] + delta;
                                    const Real c = cv.values[i * n + j];
                                    const Real ni = norms[i] > Real(0) ? norms[i] : Real(1);
                                    const Real nj = norms[j] > Real(0) ? norms[j] : Real(1);
                                    for (std::size_t p = 0; p < d; ++p) {
                                        dt.values[i * d + p] +=
                                            gv * (tt.values[j * d + p] / den -
                                                  c * norms[j] * tt.values[i * d + p] / (ni * den));
                                        dt.values[j * d + p] +=
                                            gv * (tt.values[i * d + p] / den -
                                                  c * norms[i] * tt.values[j * d + p] / (nj * den));
                                    }
                                }
                        });
                    });
    }

    // softmax(gamma * s) over a vector, max-subtracted for stability.
    Var softmax_temp(Var s, Real gamma) {
        const auto& ts = val(s);
        if (ts.rank() != 1 || ts.size() == 0) {
            throw DimensionError("softmax_temp: need non-empty vector, got " + ts.shape_string());
        }
        if (!(gamma > Real(0))) throw ContractError("softmax_temp: gamma must be positive");
        Tensor<Real> out = Tensor<Real>::zeros({ts.size()});
        softmax_fill(ts.values.data(), out.values.data(), ts.size(), gamma);
        return push(std::move(out), needs_grad({s}), "softmax_temp", [s, gamma](Tape& t, int self) {
            const auto& g = t.grad_of(self);
            const auto& y = t.val_of(self);
            Real inner = 0;
            for (std::size_t i = 0; i < y.size(); ++i) inner += g.values[i] * y.values[i];
            t.accumulate(s, [&](Tensor<Real>& ds) {
                for (std::size_t i = 0; i < y.size(); ++i)
                    ds.values[i] += gamma * y.values[i] * (g.values[i] - inner);
            });
        });
    }

    // Row-wise softmax(gamma * S) restricted to each row's support set;
    // entries outside the support are structural zeros.
    Var masked_row_softmax(Var s, const std::vector<std::vector<std::size_t>>& support, Real gamma) {
        const auto& ts = val(s);
        if (ts.rank() != 2 || ts.shape[0] != ts.shape[1] || support.size() != ts.shape[0]) {
            throw DimensionError("masked_row_softmax: scores " + ts.shape_string() + ", support " +
                                 std::to_string(support.size()) + " rows");
        }
        if (!(gamma > Real(0))) throw ContractError("masked_row_softmax: gamma must be positive");
        const std::size_t n = ts.shape[0];
        Tensor<Real> out = Tensor<Real>::zeros({n, n});
        std::vector<Real> buf_in(n), buf_out(n);
        for (std::size_t i = 0; i < n; ++i) {
            const auto& sup = support[i];
            if (sup.empty()) throw ContractError("masked_row_softmax: empty support for row " + std::to_string(i));
            for (std::size_t k = 0; k < sup.size(); ++k) {
                if (sup[k] >= n) throw DimensionError("masked_row_softmax: support index out of range");
                buf_in[k] = ts.values[i * n + sup[k]];
            }
            softmax_fill(buf_in.data(), buf_out.data(), sup.size(), gamma);
            for (std::size_t k = 0; k < sup.size(); ++k) out.values[i * n + sup[k]] = buf_out[k];
        }
        auto support_copy = support;
        return push(std::move(out), needs_grad({s}), "masked_row_softmax",
                    [s, n, gamma, support_copy](Tape& t, int self) {
                        const auto& g = t.grad_of(self);
                        const auto& y = t.val_of(self);
                        t.accumulate(s, [&](Tensor<Real>& ds) {
                            for (std::size_t i = 0; i < n; ++i) {
                                const auto& sup = support_copy[i];
                                Real inner = 0;
                                for (std::size_t z : sup)
                                    inner += g.values[i * n + z] * y.values[i * n + z];
                                for (std::size_t z : sup)
                                    ds.values[i * n + z] += gamma * y.values[i * n + z] *
                                                            (g.values[i * n + z] - inner);
                            }
                        });
                    });
    }

    // --------------------------------------------------------------- losses

    // sum_z p_z log(p_z / q_z), with 0 log(0/.) = 0.
    Var kl_divergence(Var p, Var q) {
        const auto& tp = val(p);
        const auto& tq = val(q);
        require_same_shape(tp, tq, "kl_divergence");
        Real acc = kl_sum(tp.values.data(), tq.values.data(), tp.size());
        return push(Tensor<Real>::scalar(acc), needs_grad({p, q}), "kl_divergence",
                    [p, q](Tape& t, int self) {
                        const Real g = t.grad_of(self).values[0];
                        const auto& tp = t.val(p);
                        const auto& tq = t.val(q);
                        kl_backward(t, p, q, tp.values.data(), tq.values.data(), tp.size(), 0, g);
                    });
    }

    // Sum over rows of KL(P_row || Q_row) for matching distribution matrices.
    Var kl_rows_sum(Var p, Var q) {
        const auto& tp = val(p);
        const auto& tq = val(q);
        require_same_shape(tp, tq, "kl_rows_sum");
        if (tp.rank() != 2) throw DimensionError("kl_rows_sum: need matrices");
        Real acc = kl_sum(tp.values.data(), tq.values.data(), tp.size());
        return push(Tensor<Real>::scalar(acc), needs_grad({p, q}), "kl_rows_sum",
                    [p, q](Tape& t, int self) {
                        const Real g = t.grad_of(self).values[0];
                        const auto& tp = t.val(p);
                        const auto& tq = t.val(q);
                        kl_backward(t, p, q, tp.values.data(), tq.values.data(), tp.size(), 0, g);
                    });
    }

    // log-sum-exp(scores) - scores[target]
    Var softmax_cross_entropy(Var scores, std::size_t target) {
        const auto& ts = val(scores);
        if (ts.rank() != 1 || ts.size() == 0) throw DimensionError("softmax_cross_entropy: need vector");
        if (target >= ts.size()) throw ContractError("softmax_cross_entropy: target out of range");
        const Real mx = *std::max_element(ts.values.begin(), ts.values.end());
        Real z = 0;
        for (Real v : ts.values) z += std::exp(v - mx);
        const Real loss = mx + std::log(z) - ts.values[target];
        return push(Tensor<Real>::scalar(loss), needs_grad({scores}), "softmax_cross_entropy",
                    [scores, target, mx, z](Tape& t, int self) {
                        const Real g = t.grad_of(self).values[0];
                        const auto& ts = t.val(scores);
                        t.accumulate(scores, [&](Tensor<Real>& ds) {
                            for (std::size_t i = 0; i < ts.size(); ++i) {
                                const Real soft = std::exp(ts.values[i] - mx) / z;
                                ds.values[i] += g * (soft - (i == target ? Real(1) : Real(0)));
                            }
                        });
                    });
    }

    // ------------------------------------------------------------- backward

    // Seeds d(loss)/d(loss) = 1 and replays the record in reverse. Gradients
    // of every reachable grad-tracked node accumulate additively.
    void backward(Var loss) {
        const auto& tl = val(loss);
        if (tl.size() != 1) throw ContractError("backward: loss node must be scalar");
        if (!nodes_[static_cast<std::size_t>(loss.id)].requires_grad) return;
        grad_mut(loss.id).values[0] += Real(1);
        for (int id = loss.id; id >= 0; --id) {
            Node& n = nodes_[static_cast<std::size_t>(id)];
            if (n.back && n.requires_grad) n.back(*this, id);
        }
    }

    void zero_grads() {
        for (Node& n : nodes_) {
            if (n.requires_grad) n.grad.fill(Real(0));
        }
    }

    // ---------------------------------------------------------------- state

    const Tensor<Real>& value(Var v) const { return val(v); }

    const Tensor<Real>& grad(Var v) const {
        const Node& n = node_at(v.id);
        if (!n.requires_grad) throw ContractError("grad() on a non-tracked node");
        return n.grad;
    }

    bool requires_grad(Var v) const { return node_at(v.id).requires_grad; }

    std::size_t node_count() const { return nodes_.size(); }

    const char* op_name(int id) const { return node_at(id).op; }

    // First node (execution order) with a non-finite entry, for diagnostics.
    std::optional<std::pair<int, std::string>> first_non_finite() const {
        for (std::size_t i = 0; i < nodes_.size(); ++i) {
            if (!nodes_[i].value.all_finite()) {
                return std::make_pair(static_cast<int>(i), std::string(nodes_[i].op));
            }
        }
        return std::nullopt;
    }

private:
    struct Node {
        Tensor<Real> value;
        Tensor<Real> grad;
        bool requires_grad = false;
        const char* op = "leaf";
        std::function<void(Tape&, int)> back;
    };

    std::vector<Node> nodes_;
    CosineMode cosine_mode_;

    Real cosine_delta() const {
        return cosine_mode_ == CosineMode::guarded ? Real(1e-12) : Real(0);
    }

    void check_cosine_norms(Real nu, Real nv) const {
        if (cosine_mode_ == CosineMode::strict && (nu == Real(0) || nv == Real(0))) {
            throw DegenerateInputError("cosine: zero-norm input in strict mode");
        }
    }

    static Real norm2(const Tensor<Real>& t) {
        Real acc = 0;
        for (Real v : t.values) acc += v * v;
        return std::sqrt(acc);
    }

    static void softmax_fill(const Real* in, Real* out, std::size_t n, Real gamma) {
        Real mx = in[0];
        for (std::size_t i = 1; i < n; ++i) mx = std::max(mx, in[i]);
        Real z = 0;
        for (std::size_t i = 0; i < n; ++i) {
            out[i] = std::exp(gamma * (in[i] - mx));
            z += out[i];
        }
        for (std::size_t i = 0; i < n; ++i) out[i] /= z;
    }

    static Real kl_sum(const Real* p, const Real* q, std::size_t n) {
        Real acc = 0;
        for (std::size_t i = 0; i < n; ++i) {
            if (p[i] > Real(0)) acc += p[i] * (std::log(p[i]) - std::log(q[i]));
        }
        return acc;
    }

    static void kl_backward(Tape& t, Var p, Var q, const Real* pv, const Real* qv,
                            std::size_t n, std::size_t offset, Real g) {
        t.accumulate(p, [&](Tensor<Real>& dp) {
            for (std::size_t i = 0; i < n; ++i) {
                if (pv[i] > Real(0))
                    dp.values[offset + i] += g * (std::log(pv[i]) - std::log(qv[i]) + Real(1));
            }
        });
        t.accumulate(q, [&](Tensor<Real>& dq) {
            for (std::size_t i = 0; i < n; ++i) {
                if (pv[i] > Real(0)) dq.values[offset + i] -= g * pv[i] / qv[i];
            }
        });
    }

    const Node& node_at(int id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= nodes_.size()) {
            throw ContractError("invalid node id " + std::to_string(id));
        }
        return nodes_[static_cast<std::size_t>(id)];
    }

    const Tensor<Real>& val(Var v) const { return node_at(v.id).value; }
    const Tensor<Real>& val_of(int id) const { return node_at(id).value; }
    const Tensor<Real>& grad_of(int id) const { return node_at(id).grad; }

    Tensor<Real>& grad_mut(int id) {
        return nodes_[static_cast<std::size_t>(id)].grad;
    }

    bool needs_grad(std::initializer_list<Var> ins) const {
        for (Var v : ins) {
            if (node_at(v.id).requires_grad) return true;
        }
        return false;
    }

    // Run `fn` against the grad buffer of `v` if it is grad-tracked.
    template <typename Fn>
    void accumulate(Var v, Fn&& fn) {
        Node& n = nodes_[static_cast<std::size_t>(v.id)];
        if (n.requires_grad) fn(n.grad);
    }

    Var push(Tensor<Real> value, bool requires_grad, const char* op,
             std::function<void(Tape&, int)> back) {
        Node n;
        n.value = std::move(value);
        n.requires_grad = requires_grad;
        n.op = op;
        if (requires_grad) {
            n.grad = Tensor<Real>::zeros(n.value.shape);
            n.back = std::move(back);
        }
        nodes_.push_back(std::move(n));
        return Var{static_cast<int>(nodes_.size()) - 1};
    }
};

}  // namespace ipn
