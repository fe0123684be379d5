#include "maskdiff/tensor.hpp"

#include <cmath>
#include <stdexcept>
#include <unordered_set>

namespace maskdiff {

namespace {

Mat make(int rows, int cols, std::vector<std::shared_ptr<MatNode>> parents) {
    Mat m(rows, cols);
    m.node->parents = std::move(parents);
    return m;
}

void check_same_shape(const Mat& a, const Mat& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::domain_error(std::string(op) + ": shape mismatch");
}

}  // namespace

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols() != b.rows()) throw std::domain_error("matmul: inner dimensions differ");
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Mat out = make(m, n, {a.node, b.node});
    const double* ad = a.data().data();
    const double* bd = b.data().data();
    double* od = out.data().data();
    for (int i = 0; i < m; ++i)
        for (int p = 0; p < k; ++p) {
            const double av = ad[size_t(i) * k + p];
            if (av == 0.0) continue;
            for (int j = 0; j < n; ++j) od[size_t(i) * n + j] += av * bd[size_t(p) * n + j];
        }
    auto *an = a.node.get(), *bn = b.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, bn, on, m, k, n] {
        const double* g = on->grad.data();
        const double* ad2 = an->data.data();
        const double* bd2 = bn->data.data();
        double* ga = an->grad.data();
        double* gb = bn->grad.data();
        for (int i = 0; i < m; ++i)
            for (int j = 0; j < n; ++j) {
                const double gv = g[size_t(i) * n + j];
                if (gv == 0.0) continue;
                for (int p = 0; p < k; ++p) {
                    ga[size_t(i) * k + p] += gv * bd2[size_t(p) * n + j];
                    gb[size_t(p) * n + j] += gv * ad2[size_t(i) * k + p];
                }
            }
    };
    return out;
}

Mat transpose(const Mat& a) {
    Mat out = make(a.cols(), a.rows(), {a.node});
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out.at(j, i) = a.at(i, j);
    auto *an = a.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, on] {
        for (int i = 0; i < an->rows; ++i)
            for (int j = 0; j < an->cols; ++j)
                an->grad[size_t(i) * an->cols + j] += on->grad[size_t(j) * on->cols + i];
    };
    return out;
}

Mat add(const Mat& a, const Mat& b) {
    check_same_shape(a, b, "add");
    Mat out = make(a.rows(), a.cols(), {a.node, b.node});
    for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] + b.data()[i];
    auto *an = a.node.get(), *bn = b.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, bn, on] {
        for (size_t i = 0; i < on->grad.size(); ++i) {
            an->grad[i] += on->grad[i];
            bn->grad[i] += on->grad[i];
        }
    };
    return out;
}

Mat sub(const Mat& a, const Mat& b) {
    check_same_shape(a, b, "sub");
    Mat out = make(a.rows(), a.cols(), {a.node, b.node});
    for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] - b.data()[i];
    auto *an = a.node.get(), *bn = b.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, bn, on] {
        for (size_t i = 0; i < on->grad.size(); ++i) {
            an->grad[i] += on->grad[i];
            bn->grad[i] -= on->grad[i];
        }
    };
    return out;
}

Mat mul(const Mat& a, const Mat& b) {
    check_same_shape(a, b, "mul");
    Mat out = make(a.rows(), a.cols(), {a.node, b.node});
    for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] * b.data()[i];
    auto *an = a.node.get(), *bn = b.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, bn, on] {
        for (size_t i = 0; i < on->grad.size(); ++i) {
            an->grad[i] += on->grad[i] * bn->data[i];
            bn->grad[i] += on->grad[i] * an->data[i];
        }
    };
    return out;
}

Mat add_rowvec(const Mat& a, const Mat& row) {
    if (row.rows() != 1 || row.cols() != a.cols())
        throw std::domain_error("add_rowvec: row must be 1 x cols(a)");
    Mat out = make(a.rows(), a.cols(), {a.node, row.node});
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out.at(i, j) = a.at(i, j) + row.at(0, j);
    auto *an = a.node.get(), *rn = row.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, rn, on] {
        for (int i = 0; i < on->rows; ++i)
            for (int j = 0; j < on->cols; ++j) {
                const double g = on->grad[size_t(i) * on->cols + j];
                an->grad[size_t(i) * on->cols + j] += g;
                rn->grad[j] += g;
            }
    };
    return out;
}

Mat mul_rowvec(const Mat& a, const Mat& row) {
    if (row.rows() != 1 || row.cols() != a.cols())
        throw std::domain_error("mul_rowvec: row must be 1 x cols(a)");
    Mat out = make(a.rows(), a.cols(), {a.node, row.node});
    for (int i = 0; i < a.rows(); ++i)
        for (int j = 0; j < a.cols(); ++j) out.at(i, j) = a.at(i, j) * row.at(0, j);
    auto *an = a.node.get(), *rn = row.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, rn, on] {
        for (int i = 0; i < on->rows; ++i)
            for (int j = 0; j < on->cols; ++j) {
                const double g = on->grad[size_t(i) * on->cols + j];
                an->grad[size_t(i) * on->cols + j] += g * rn->data[j];
                rn->grad[j] += g * an->data[size_t(i) * on->cols + j];
            }
    };
    return out;
}

Mat scale(const Mat& a, double k) {
    Mat out = make(a.rows(), a.cols(), {a.node});
    for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = a.data()[i] * k;
    auto *an = a.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, on, k] {
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * k;
    };
    return out;
}

Mat exp_elem(const Mat& a) {
    Mat out = make(a.rows(), a.cols(), {a.node});
    for (size_t i = 0; i < out.data().size(); ++i) out.data()[i] = std::exp(a.data()[i]);
    auto *an = a.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, on] {
        for (size_t i = 0; i < on->grad.size(); ++i) an->grad[i] += on->grad[i] * on->data[i];
    };
    return out;
}

Mat silu(const Mat& a) {
    Mat out = make(a.rows(), a.cols(), {a.node});
    for (size_t i = 0; i < out.data().size(); ++i) {
        const double x = a.data()[i];
        out.data()[i] = x / (1.0 + std::exp(-x));
    }
    auto *an = a.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, on] {
        for (size_t i = 0; i < on->grad.size(); ++i) {
            const double x = an->data[i];
            const double s = 1.0 / (1.0 + std::exp(-x));
            an->grad[i] += on->grad[i] * s * (1.0 + x * (1.0 - s));
        }
    };
    return out;
}

Mat gelu(const Mat& a) {
    Mat out = make(a.rows(), a.cols(), {a.node});
    const double inv_sqrt2 = 0.7071067811865476;
    for (size_t i = 0; i < out.data().size(); ++i) {
        const double x = a.data()[i];
        out.data()[i] = 0.5 * x * (1.0 + std::erf(x * inv_sqrt2));
    }
    auto *an = a.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, on, inv_sqrt2] {
        const double inv_sqrt2pi = 0.3989422804014327;
        for (size_t i = 0; i < on->grad.size(); ++i) {
            const double x = an->data[i];
            const double cdf = 0.5 * (1.0 + std::erf(x * inv_sqrt2));
            const double pdf = inv_sqrt2pi * std::exp(-0.5 * x * x);
            an->grad[i] += on->grad[i] * (cdf + x * pdf);
        }
    };
    return out;
}

Mat softmax_rows(const Mat& a) {
    Mat out = make(a.rows(), a.cols(), {a.node});
    const int n = a.cols();
    for (int i = 0; i < a.rows(); ++i) {
        double mx = a.at(i, 0);
        for (int j = 1; j < n; ++j) mx = std::max(mx, a.at(i, j));
        double sum = 0.0;
        for (int j = 0; j < n; ++j) sum += (out.at(i, j) = std::exp(a.at(i, j) - mx));
        for (int j = 0; j < n; ++j) out.at(i, j) /= sum;
    }
    auto *an = a.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, on, n] {
        for (int i = 0; i < on->rows; ++i) {
            double dot = 0.0;
            for (int j = 0; j < n; ++j)
                dot += on->grad[size_t(i) * n + j] * on->data[size_t(i) * n + j];
            for (int j = 0; j < n; ++j) {
                const double y = on->data[size_t(i) * n + j];
                an->grad[size_t(i) * n + j] += y * (on->grad[size_t(i) * n + j] - dot);
            }
        }
    };
    return out;
}

Mat layernorm_rows(const Mat& a, double eps) {
    Mat out = make(a.rows(), a.cols(), {a.node});
    const int n = a.cols();
    std::vector<double> inv_std(a.rows());
    for (int i = 0; i < a.rows(); ++i) {
        double mean = 0.0;
        for (int j = 0; j < n; ++j) mean += a.at(i, j);
        mean /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            const double d = a.at(i, j) - mean;
            var += d * d;
        }
        var /= n;
        inv_std[i] = 1.0 / std::sqrt(var + eps);
        for (int j = 0; j < n; ++j) out.at(i, j) = (a.at(i, j) - mean) * inv_std[i];
    }
    auto *an = a.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, on, n, inv_std] {
        for (int i = 0; i < on->rows; ++i) {
            double gsum = 0.0, gysum = 0.0;
            for (int j = 0; j < n; ++j) {
                gsum += on->grad[size_t(i) * n + j];
                gysum += on->grad[size_t(i) * n + j] * on->data[size_t(i) * n + j];
            }
            for (int j = 0; j < n; ++j) {
                const double y = on->data[size_t(i) * n + j];
                an->grad[size_t(i) * n + j] +=
                    inv_std[i] * (on->grad[size_t(i) * n + j] - gsum / n - y * gysum / n);
            }
        }
    };
    return out;
}

Mat concat_cols(const std::vector<Mat>& parts) {
    if (parts.empty()) throw std::domain_error("concat_cols: no parts");
    int cols = 0;
    const int rows = parts[0].rows();
    std::vector<std::shared_ptr<MatNode>> parents;
    for (const Mat& p : parts) {
        if (p.rows() != rows) throw std::domain_error("concat_cols: row counts differ");
        cols += p.cols();
        parents.push_back(p.node);
    }
    Mat out = make(rows, cols, parents);
    int off = 0;
    for (const Mat& p : parts) {
        for (int i = 0; i < rows; ++i)
            for (int j = 0; j < p.cols(); ++j) out.at(i, off + j) = p.at(i, j);
        off += p.cols();
    }
    auto* on = out.node.get();
    out.node->backward_fn = [on] {
        int off2 = 0;
        for (const auto& pn : on->parents) {
            for (int i = 0; i < pn->rows; ++i)
                for (int j = 0; j < pn->cols; ++j)
                    pn->grad[size_t(i) * pn->cols + j] +=
                        on->grad[size_t(i) * on->cols + off2 + j];
            off2 += pn->cols;
        }
    };
    return out;
}

Mat slice_cols(const Mat& a, int begin, int end) {
    if (begin < 0 || end > a.cols() || begin >= end)
        throw std::domain_error("slice_cols: bad range");
    Mat out = make(a.rows(), end - begin, {a.node});
    for (int i = 0; i < a.rows(); ++i)
        for (int j = begin; j < end; ++j) out.at(i, j - begin) = a.at(i, j);
    auto *an = a.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, on, begin] {
        for (int i = 0; i < on->rows; ++i)
            for (int j = 0; j < on->cols; ++j)
                an->grad[size_t(i) * an->cols + begin + j] += on->grad[size_t(i) * on->cols + j];
    };
    return out;
}

Mat mean_rows(const Mat& a) {
    Mat out = make(1, a.cols(), {a.node});
    for (int j = 0; j < a.cols(); ++j) {
        double s = 0.0;
        for (int i = 0; i < a.rows(); ++i) s += a.at(i, j);
        out.at(0, j) = s / a.rows();
    }
    auto *an = a.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, on] {
        for (int i = 0; i < an->rows; ++i)
            for (int j = 0; j < an->cols; ++j)
                an->grad[size_t(i) * an->cols + j] += on->grad[j] / an->rows;
    };
    return out;
}

Mat rope(const Mat& a, double base) {
    if (a.cols() % 2 != 0) throw std::domain_error("rope: needs an even column count");
    Mat out = make(a.rows(), a.cols(), {a.node});
    const int half = a.cols() / 2;
    std::vector<double> freqs(half);
    for (int i = 0; i < half; ++i) freqs[i] = std::pow(base, -2.0 * i / a.cols());
    for (int p = 0; p < a.rows(); ++p)
        for (int i = 0; i < half; ++i) {
            const double ang = p * freqs[i];
            const double c = std::cos(ang), s = std::sin(ang);
            const double x = a.at(p, 2 * i), y = a.at(p, 2 * i + 1);
            out.at(p, 2 * i) = x * c - y * s;
            out.at(p, 2 * i + 1) = x * s + y * c;
        }
    auto *an = a.node.get(), *on = out.node.get();
    out.node->backward_fn = [an, on, freqs, half] {
        for (int p = 0; p < on->rows; ++p)
            for (int i = 0; i < half; ++i) {
                const double ang = p * freqs[i];
                const double c = std::cos(ang), s = std::sin(ang);
                const double gx = on->grad[size_t(p) * on->cols + 2 * i];
                const double gy = on->grad[size_t(p) * on->cols + 2 * i + 1];
                an->grad[size_t(p) * an->cols + 2 * i] += gx * c + gy * s;
                an->grad[size_t(p) * an->cols + 2 * i + 1] += -gx * s + gy * c;
            }
    };
    return out;
}

Mat gather_rows(const Mat& table, const std::vector<int>& idx) {
    for (int i : idx)
        if (i < 0 || i >= table.rows()) throw std::domain_error("gather_rows: index out of range");
    Mat out = make(static_cast<int>(idx.size()), table.cols(), {table.node});
    for (size_t r = 0; r < idx.size(); ++r)
        for (int j = 0; j < table.cols(); ++j) out.at(static_cast<int>(r), j) = table.at(idx[r], j);
    auto *tn = table.node.get(), *on = out.node.get();
    out.node->backward_fn = [tn, on, idx] {
        for (size_t r = 0; r < idx.size(); ++r)
            for (int j = 0; j < on->cols; ++j)
                tn->grad[size_t(idx[r]) * tn->cols + j] += on->grad[r * on->cols + j];
    };
    return out;
}

void backward(const std::vector<Mat>& roots) {
    std::vector<MatNode*> order;
    std::unordered_set<MatNode*> seen;
    // Iterative post-order to keep deep graphs off the call stack.
    struct Frame {
        MatNode* node;
        size_t next_parent;
    };
    std::vector<Frame> stack;
    for (const Mat& root : roots) {
        if (!root.node || seen.count(root.node.get())) continue;
        stack.push_back({root.node.get(), 0});
        seen.insert(root.node.get());
        while (!stack.empty()) {
            Frame& f = stack.back();
            if (f.next_parent < f.node->parents.size()) {
                MatNode* p = f.node->parents[f.next_parent++].get();
                if (!seen.count(p)) {
                    seen.insert(p);
                    stack.push_back({p, 0});
                }
            } else {
                order.push_back(f.node);
                stack.pop_back();
            }
        }
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it)
        if ((*it)->backward_fn) (*it)->backward_fn();
}

}  // namespace maskdiff
