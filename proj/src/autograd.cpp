#include "kpdet/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace kpdet::ag {

namespace {
thread_local int g_no_grad_depth = 0;
}

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

Var leaf(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    n->requires_grad = true;
    n->is_leaf = true;
    return n;
}

Var constant(Tensor value) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    return n;
}

Var make_node(Tensor value, std::vector<Var> parents, std::function<void(Node&)> backward) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (!grad_enabled()) return n;
    n->parents = std::move(parents);
    for (const Var& p : n->parents) {
        if (p->requires_grad) {
            n->requires_grad = true;
            break;
        }
    }
    if (n->requires_grad) {
        n->backward_op = std::move(backward);
    } else {
        n->parents.clear();
    }
    return n;
}

void backward(const Var& root, double seed) {
    if (root->value.size() != 1) throw DimensionError("backward root must be scalar");
    // Iterative post-order DFS: children (parents, here) before the node itself.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root.get(), 0);
    visited.insert(root.get());
    while (!stack.empty()) {
        auto& [node, next] = stack.back();
        if (next < node->parents.size()) {
            Node* p = node->parents[next++].get();
            if (p->requires_grad && visited.insert(p).second) stack.emplace_back(p, 0);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }
    root->ensure_grad()[0] += seed;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (n->backward_op && n->requires_grad) n->backward_op(*n);
    }
}

namespace {

void check_same_shape(const Var& a, const Var& b, const char* op) {
    if (!a->value.same_shape(b->value)) {
        throw DimensionError(std::string(op) + ": operand shapes differ");
    }
}

// Unary elementwise helper: dy/dx supplied as a per-element function of (x, y).
Var unary_op(const Var& a, double (*fwd)(double), double (*dfdx)(double, double)) {
    Tensor y(a->value.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = fwd(a->value[i]);
    return make_node(std::move(y), {a}, [a, dfdx](Node& n) {
        Tensor g(a->value.shape());
        for (std::size_t i = 0; i < g.size(); ++i) {
            g[i] = n.grad[i] * dfdx(a->value[i], n.value[i]);
        }
        a->add_grad(g);
    });
}

double stable_sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

} // namespace

Var add(const Var& a, const Var& b) {
    check_same_shape(a, b, "add");
    Tensor y(a->value.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a->value[i] + b->value[i];
    return make_node(std::move(y), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) a->add_grad(n.grad);
        if (b->requires_grad) b->add_grad(n.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    check_same_shape(a, b, "sub");
    Tensor y(a->value.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a->value[i] - b->value[i];
    return make_node(std::move(y), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) a->add_grad(n.grad);
        if (b->requires_grad) {
            Tensor g(n.grad.shape());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = -n.grad[i];
            b->add_grad(g);
        }
    });
}

Var mul(const Var& a, const Var& b) {
    check_same_shape(a, b, "mul");
    Tensor y(a->value.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a->value[i] * b->value[i];
    return make_node(std::move(y), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor g(n.grad.shape());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * b->value[i];
            a->add_grad(g);
        }
        if (b->requires_grad) {
            Tensor g(n.grad.shape());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * a->value[i];
            b->add_grad(g);
        }
    });
}

Var vdiv(const Var& a, const Var& b) {
    check_same_shape(a, b, "vdiv");
    Tensor y(a->value.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a->value[i] / b->value[i];
    return make_node(std::move(y), {a, b}, [a, b](Node& n) {
        if (a->requires_grad) {
            Tensor g(n.grad.shape());
            for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] / b->value[i];
            a->add_grad(g);
        }
        if (b->requires_grad) {
            Tensor g(n.grad.shape());
            for (std::size_t i = 0; i < g.size(); ++i) {
                g[i] = -n.grad[i] * a->value[i] / (b->value[i] * b->value[i]);
            }
            b->add_grad(g);
        }
    });
}

Var scale(const Var& a, double c) {
    Tensor y(a->value.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a->value[i] * c;
    return make_node(std::move(y), {a}, [a, c](Node& n) {
        Tensor g(n.grad.shape());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * c;
        a->add_grad(g);
    });
}

Var add_scalar(const Var& a, double c) {
    Tensor y(a->value.shape());
    for (std::size_t i = 0; i < y.size(); ++i) y[i] = a->value[i] + c;
    return make_node(std::move(y), {a}, [a](Node& n) { a->add_grad(n.grad); });
}

Var neg(const Var& a) { return scale(a, -1.0); }

Var square(const Var& a) {
    return unary_op(a, [](double x) { return x * x; },
                    [](double x, double) { return 2.0 * x; });
}

Var vabs(const Var& a) {
    return unary_op(a, [](double x) { return std::fabs(x); },
                    [](double x, double) { return x > 0.0 ? 1.0 : (x < 0.0 ? -1.0 : 0.0); });
}

Var vexp(const Var& a) {
    return unary_op(a, [](double x) { return std::exp(x); },
                    [](double, double y) { return y; });
}

Var vlog(const Var& a) {
    return unary_op(a, [](double x) { return std::log(x); },
                    [](double x, double) { return 1.0 / x; });
}

Var softplus(const Var& a) {
    return unary_op(a,
                    [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x))
                                                  : std::log1p(std::exp(x)); },
                    [](double x, double) { return stable_sigmoid(x); });
}

Var sigmoid(const Var& a) {
    return unary_op(a, [](double x) { return stable_sigmoid(x); },
                    [](double, double y) { return y * (1.0 - y); });
}

Var silu(const Var& a) {
    return unary_op(a, [](double x) { return x * stable_sigmoid(x); },
                    [](double x, double) {
                        const double s = stable_sigmoid(x);
                        return s * (1.0 + x * (1.0 - s));
                    });
}

Var matmul(const Var& a, const Var& b) {
    Tensor y = kpdet::matmul(a->value, b->value);
    return make_node(std::move(y), {a, b}, [a, b](Node& n) {
        Tensor ga, gb;
        matmul_backward(a->value, b->value, n.grad, ga, gb);
        if (a->requires_grad) a->add_grad(ga);
        if (b->requires_grad) b->add_grad(gb);
    });
}

Var matmul_nt(const Var& a, const Var& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 ||
        a->value.extent(1) != b->value.extent(1)) {
        throw DimensionError("matmul_nt: shapes must be [m,k] and [n,k]");
    }
    const std::size_t m = a->value.extent(0), k = a->value.extent(1), nn = b->value.extent(0);
    Tensor y({m, nn});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < nn; ++j) {
            double s = 0.0;
            for (std::size_t kk = 0; kk < k; ++kk) s += a->value.at(i, kk) * b->value.at(j, kk);
            y.at(i, j) = s;
        }
    }
    return make_node(std::move(y), {a, b}, [a, b, m, k, nn](Node& n) {
        if (a->requires_grad) {
            Tensor ga({m, k});
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < nn; ++j) {
                    const double g = n.grad.at(i, j);
                    if (g == 0.0) continue;
                    for (std::size_t kk = 0; kk < k; ++kk) ga.at(i, kk) += g * b->value.at(j, kk);
                }
            }
            a->add_grad(ga);
        }
        if (b->requires_grad) {
            Tensor gb({nn, k});
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < nn; ++j) {
                    const double g = n.grad.at(i, j);
                    if (g == 0.0) continue;
                    for (std::size_t kk = 0; kk < k; ++kk) gb.at(j, kk) += g * a->value.at(i, kk);
                }
            }
            b->add_grad(gb);
        }
    });
}

Var transpose(const Var& a) {
    if (a->value.rank() != 2) throw DimensionError("transpose expects rank-2");
    const std::size_t m = a->value.extent(0), k = a->value.extent(1);
    Tensor y({k, m});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < k; ++j) y.at(j, i) = a->value.at(i, j);
    }
    return make_node(std::move(y), {a}, [a, m, k](Node& n) {
        Tensor g({m, k});
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < k; ++j) g.at(i, j) = n.grad.at(j, i);
        }
        a->add_grad(g);
    });
}

Var add_row_bias(const Var& x, const Var& b) {
    if (x->value.rank() != 2 || b->value.rank() != 1 ||
        x->value.extent(1) != b->value.extent(0)) {
        throw DimensionError("add_row_bias: x [m,n] and b [n] required");
    }
    const std::size_t m = x->value.extent(0), c = x->value.extent(1);
    Tensor y({m, c});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < c; ++j) y.at(i, j) = x->value.at(i, j) + b->value[j];
    }
    return make_node(std::move(y), {x, b}, [x, b, m, c](Node& n) {
        if (x->requires_grad) x->add_grad(n.grad);
        if (b->requires_grad) {
            Tensor g({c});
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < c; ++j) g[j] += n.grad.at(i, j);
            }
            b->add_grad(g);
        }
    });
}

Var linear(const Var& x, const Var& w, const Var& b) {
    return add_row_bias(matmul(x, w), b);
}

Var sum_all(const Var& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a->value.size(); ++i) s += a->value[i];
    return make_node(Tensor::scalar(s), {a}, [a](Node& n) {
        Tensor g(a->value.shape());
        for (std::size_t i = 0; i < g.size(); ++i) g[i] = n.grad[0];
        a->add_grad(g);
    });
}

Var mean_all(const Var& a) {
    return scale(sum_all(a), 1.0 / static_cast<double>(a->value.size()));
}

Var reshape(const Var& a, std::vector<std::size_t> shape) {
    if (shape_size(shape) != a->value.size()) throw DimensionError("reshape size mismatch");
    Tensor y(std::move(shape), a->value.vec());
    return make_node(std::move(y), {a}, [a](Node& n) {
        a->add_grad(Tensor(a->value.shape(), n.grad.vec()));
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no parts");
    const std::size_t c = parts[0]->value.extent(1);
    std::size_t rows = 0;
    for (const Var& p : parts) {
        if (p->value.rank() != 2 || p->value.extent(1) != c) {
            throw DimensionError("concat_rows: column counts differ");
        }
        rows += p->value.extent(0);
    }
    Tensor y({rows, c});
    std::size_t r0 = 0;
    for (const Var& p : parts) {
        const std::size_t pr = p->value.extent(0);
        std::copy(p->value.data(), p->value.data() + pr * c, y.data() + r0 * c);
        r0 += pr;
    }
    std::vector<Var> parents(parts.begin(), parts.end());
    return make_node(std::move(y), std::move(parents), [parts, c](Node& n) {
        std::size_t r0 = 0;
        for (const Var& p : parts) {
            const std::size_t pr = p->value.extent(0);
            if (p->requires_grad) {
                Tensor g({pr, c});
                std::copy(n.grad.data() + r0 * c, n.grad.data() + (r0 + pr) * c, g.data());
                p->add_grad(g);
            }
            r0 += pr;
        }
    });
}

Var concat_cols(const Var& a, const Var& b) {
    if (a->value.rank() != 2 || b->value.rank() != 2 ||
        a->value.extent(0) != b->value.extent(0)) {
        throw DimensionError("concat_cols: row counts differ");
    }
    const std::size_t m = a->value.extent(0), ca = a->value.extent(1), cb = b->value.extent(1);
    Tensor y({m, ca + cb});
    for (std::size_t i = 0; i < m; ++i) {
        std::copy(a->value.data() + i * ca, a->value.data() + (i + 1) * ca,
                  y.data() + i * (ca + cb));
        std::copy(b->value.data() + i * cb, b->value.data() + (i + 1) * cb,
                  y.data() + i * (ca + cb) + ca);
    }
    return make_node(std::move(y), {a, b}, [a, b, m, ca, cb](Node& n) {
        if (a->requires_grad) {
            Tensor g({m, ca});
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < ca; ++j) g.at(i, j) = n.grad.at(i, j);
            }
            a->add_grad(g);
        }
        if (b->requires_grad) {
            Tensor g({m, cb});
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < cb; ++j) g.at(i, j) = n.grad.at(i, ca + j);
            }
            b->add_grad(g);
        }
    });
}

Var slice_rows(const Var& a, std::size_t start, std::size_t len) {
    if (a->value.rank() != 2 || start + len > a->value.extent(0)) {
        throw DimensionError("slice_rows out of range");
    }
    const std::size_t c = a->value.extent(1);
    Tensor y({len, c});
    std::copy(a->value.data() + start * c, a->value.data() + (start + len) * c, y.data());
    return make_node(std::move(y), {a}, [a, start, len, c](Node& n) {
        Tensor g(a->value.shape());
        std::copy(n.grad.data(), n.grad.data() + len * c, g.data() + start * c);
        a->add_grad(g);
    });
}

Var slice_cols(const Var& a, std::size_t start, std::size_t len) {
    if (a->value.rank() != 2 || start + len > a->value.extent(1)) {
        throw DimensionError("slice_cols out of range");
    }
    const std::size_t m = a->value.extent(0), c = a->value.extent(1);
    Tensor y({m, len});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < len; ++j) y.at(i, j) = a->value.at(i, start + j);
    }
    return make_node(std::move(y), {a}, [a, start, len, m](Node& n) {
        Tensor g(a->value.shape());
        for (std::size_t i = 0; i < m; ++i) {
            for (std::size_t j = 0; j < len; ++j) g.at(i, start + j) = n.grad.at(i, j);
        }
        a->add_grad(g);
    });
}

Var gather_rows(const Var& a, std::vector<std::size_t> indices) {
    if (a->value.rank() != 2) throw DimensionError("gather_rows expects rank-2");
    const std::size_t c = a->value.extent(1);
    for (std::size_t idx : indices) {
        if (idx >= a->value.extent(0)) throw DimensionError("gather_rows index out of range");
    }
    Tensor y({indices.size(), c});
    for (std::size_t i = 0; i < indices.size(); ++i) {
        std::copy(a->value.data() + indices[i] * c, a->value.data() + (indices[i] + 1) * c,
                  y.data() + i * c);
    }
    return make_node(std::move(y), {a}, [a, indices = std::move(indices), c](Node& n) {
        Tensor g(a->value.shape());
        for (std::size_t i = 0; i < indices.size(); ++i) {
            for (std::size_t j = 0; j < c; ++j) g.at(indices[i], j) += n.grad.at(i, j);
        }
        a->add_grad(g);
    });
}

Var softmax_rows(const Var& a) {
    if (a->value.rank() != 2) throw DimensionError("softmax_rows expects rank-2");
    Tensor y = kpdet::softmax(a->value, 1);
    return make_node(std::move(y), {a}, [a](Node& n) {
        a->add_grad(softmax_backward(n.value, n.grad, 1));
    });
}

Var rms_norm_rows(const Var& x, const Var& gain, double eps) {
    if (x->value.rank() != 2 || gain->value.rank() != 1 ||
        x->value.extent(1) != gain->value.extent(0)) {
        throw DimensionError("rms_norm_rows: x [m,n] and gain [n] required");
    }
    const std::size_t m = x->value.extent(0), c = x->value.extent(1);
    auto rms = std::make_shared<std::vector<double>>(m);
    Tensor y({m, c});
    for (std::size_t i = 0; i < m; ++i) {
        double ss = 0.0;
        for (std::size_t j = 0; j < c; ++j) ss += x->value.at(i, j) * x->value.at(i, j);
        const double r = std::sqrt(ss / static_cast<double>(c) + eps);
        (*rms)[i] = r;
        for (std::size_t j = 0; j < c; ++j) y.at(i, j) = gain->value[j] * x->value.at(i, j) / r;
    }
    return make_node(std::move(y), {x, gain}, [x, gain, rms, m, c](Node& n) {
        if (gain->requires_grad) {
            Tensor gg({c});
            for (std::size_t i = 0; i < m; ++i) {
                for (std::size_t j = 0; j < c; ++j) {
                    gg[j] += n.grad.at(i, j) * x->value.at(i, j) / (*rms)[i];
                }
            }
            gain->add_grad(gg);
        }
        if (x->requires_grad) {
            Tensor gx({m, c});
            for (std::size_t i = 0; i < m; ++i) {
                const double r = (*rms)[i];
                double dot = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    dot += n.grad.at(i, j) * gain->value[j] * x->value.at(i, j);
                }
                const double coef = dot / (static_cast<double>(c) * r * r * r);
                for (std::size_t j = 0; j < c; ++j) {
                    gx.at(i, j) = n.grad.at(i, j) * gain->value[j] / r - coef * x->value.at(i, j);
                }
            }
            x->add_grad(gx);
        }
    });
}

Var cross_entropy_rows(const Var& logits, std::vector<int> targets) {
    if (logits->value.rank() != 2) throw DimensionError("cross_entropy_rows expects rank-2");
    const std::size_t m = logits->value.extent(0), c = logits->value.extent(1);
    if (targets.size() != m) throw DimensionError("cross_entropy_rows: one target per row");
    for (int t : targets) {
        if (t < 0 || static_cast<std::size_t>(t) >= c) {
            throw ParameterError("cross_entropy_rows: target class out of range");
        }
    }
    Tensor probs = kpdet::softmax(logits->value, 1);
    double loss = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        loss -= std::log(std::max(probs.at(i, static_cast<std::size_t>(targets[i])), 1e-300));
    }
    loss /= static_cast<double>(m);
    auto saved = std::make_shared<Tensor>(std::move(probs));
    return make_node(Tensor::scalar(loss), {logits},
                     [logits, saved, targets = std::move(targets), m, c](Node& n) {
                         const double g = n.grad[0] / static_cast<double>(m);
                         Tensor gl({m, c});
                         for (std::size_t i = 0; i < m; ++i) {
                             for (std::size_t j = 0; j < c; ++j) {
                                 gl.at(i, j) = g * saved->at(i, j);
                             }
                             gl.at(i, static_cast<std::size_t>(targets[i])) -= g;
                         }
                         logits->add_grad(gl);
                     });
}

} // namespace kpdet::ag
