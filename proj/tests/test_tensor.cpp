#include <doctest.h>

#include <cmath>
#include <functional>
#include <vector>

#include "maskdiff/rng.hpp"
#include "maskdiff/tensor.hpp"

using namespace maskdiff;

namespace {

Mat random_mat(int r, int c, Rng& rng, double scl = 1.0) {
    Mat m(r, c);
    for (auto& v : m.data()) v = scl * rng.normal();
    return m;
}

// Checks d(sum w.out)/d(inputs) against central differences for an op that
// maps fresh leaf copies of `inputs` to one output.
void gradcheck(const std::vector<Mat>& inputs,
               const std::function<Mat(const std::vector<Mat>&)>& op, Rng& rng,
               double tol = 1e-6) {
    auto clone_leaves = [&] {
        std::vector<Mat> copies;
        for (const Mat& m : inputs) {
            Mat c(m.rows(), m.cols());
            c.data() = m.data();
            copies.push_back(c);
        }
        return copies;
    };

    std::vector<Mat> leaves = clone_leaves();
    Mat out = op(leaves);
    std::vector<double> w(out.data().size());
    for (auto& v : w) v = rng.normal();
    out.grad() = w;
    backward({out});

    auto loss_at = [&](size_t which, size_t flat, double value) {
        std::vector<Mat> pert = clone_leaves();
        pert[which].data()[flat] = value;
        Mat o = op(pert);
        double loss = 0.0;
        for (size_t i = 0; i < w.size(); ++i) loss += w[i] * o.data()[i];
        return loss;
    };

    const double h = 1e-5;
    for (size_t which = 0; which < inputs.size(); ++which) {
        for (size_t flat = 0; flat < inputs[which].data().size(); ++flat) {
            const double x = inputs[which].data()[flat];
            const double fd = (loss_at(which, flat, x + h) - loss_at(which, flat, x - h)) / (2 * h);
            const double an = leaves[which].grad()[flat];
            CHECK(an == doctest::Approx(fd).epsilon(tol * 100).scale(1.0));
        }
    }
}

}  // namespace

TEST_CASE("gradients of all primitive ops match finite differences") {
    Rng rng(4242);

    SUBCASE("matmul") {
        gradcheck({random_mat(3, 4, rng), random_mat(4, 2, rng)},
                  [](const std::vector<Mat>& in) { return matmul(in[0], in[1]); }, rng);
    }
    SUBCASE("transpose") {
        gradcheck({random_mat(3, 4, rng)},
                  [](const std::vector<Mat>& in) { return transpose(in[0]); }, rng);
    }
    SUBCASE("add sub mul") {
        gradcheck({random_mat(3, 3, rng), random_mat(3, 3, rng)},
                  [](const std::vector<Mat>& in) { return add(in[0], in[1]); }, rng);
        gradcheck({random_mat(3, 3, rng), random_mat(3, 3, rng)},
                  [](const std::vector<Mat>& in) { return sub(in[0], in[1]); }, rng);
        gradcheck({random_mat(3, 3, rng), random_mat(3, 3, rng)},
                  [](const std::vector<Mat>& in) { return mul(in[0], in[1]); }, rng);
    }
    SUBCASE("row broadcasts") {
        gradcheck({random_mat(4, 3, rng), random_mat(1, 3, rng)},
                  [](const std::vector<Mat>& in) { return add_rowvec(in[0], in[1]); }, rng);
        gradcheck({random_mat(4, 3, rng), random_mat(1, 3, rng)},
                  [](const std::vector<Mat>& in) { return mul_rowvec(in[0], in[1]); }, rng);
    }
    SUBCASE("scale exp") {
        gradcheck({random_mat(2, 5, rng)},
                  [](const std::vector<Mat>& in) { return scale(in[0], -1.7); }, rng);
        gradcheck({random_mat(2, 5, rng, 0.5)},
                  [](const std::vector<Mat>& in) { return exp_elem(in[0]); }, rng);
    }
    SUBCASE("activations") {
        gradcheck({random_mat(3, 4, rng)},
                  [](const std::vector<Mat>& in) { return silu(in[0]); }, rng);
        gradcheck({random_mat(3, 4, rng)},
                  [](const std::vector<Mat>& in) { return gelu(in[0]); }, rng);
    }
    SUBCASE("softmax layernorm") {
        gradcheck({random_mat(3, 5, rng)},
                  [](const std::vector<Mat>& in) { return softmax_rows(in[0]); }, rng, 1e-5);
        gradcheck({random_mat(3, 6, rng)},
                  [](const std::vector<Mat>& in) { return layernorm_rows(in[0]); }, rng, 1e-5);
    }
    SUBCASE("concat slice mean") {
        gradcheck({random_mat(3, 2, rng), random_mat(3, 4, rng), random_mat(3, 1, rng)},
                  [](const std::vector<Mat>& in) {
                      return concat_cols({in[0], in[1], in[2]});
                  },
                  rng);
        gradcheck({random_mat(3, 6, rng)},
                  [](const std::vector<Mat>& in) { return slice_cols(in[0], 1, 4); }, rng);
        gradcheck({random_mat(5, 3, rng)},
                  [](const std::vector<Mat>& in) { return mean_rows(in[0]); }, rng);
    }
    SUBCASE("rope") {
        gradcheck({random_mat(5, 6, rng)},
                  [](const std::vector<Mat>& in) { return rope(in[0]); }, rng);
    }
    SUBCASE("gather") {
        std::vector<int> idx{2, 0, 2, 1};
        gradcheck({random_mat(4, 3, rng)},
                  [idx](const std::vector<Mat>& in) { return gather_rows(in[0], idx); }, rng);
    }
    SUBCASE("composite attention-like graph") {
        gradcheck({random_mat(4, 6, rng), random_mat(6, 6, rng), random_mat(6, 6, rng),
                   random_mat(6, 6, rng)},
                  [](const std::vector<Mat>& in) {
                      Mat q = rope(matmul(in[0], in[1]));
                      Mat k = rope(matmul(in[0], in[2]));
                      Mat v = matmul(in[0], in[3]);
                      Mat att = softmax_rows(scale(matmul(q, transpose(k)), 1.0 / std::sqrt(6.0)));
                      return layernorm_rows(matmul(att, v));
                  },
                  rng, 1e-4);
    }
}

TEST_CASE("rope preserves norms and fixes position zero") {
    Rng rng(7);
    Mat a = random_mat(4, 8, rng);
    Mat r = rope(a);
    for (int j = 0; j < 8; ++j) CHECK(r.at(0, j) == doctest::Approx(a.at(0, j)).epsilon(1e-15));
    for (int i = 0; i < 4; ++i) {
        double na = 0, nr = 0;
        for (int j = 0; j < 8; ++j) {
            na += a.at(i, j) * a.at(i, j);
            nr += r.at(i, j) * r.at(i, j);
        }
        CHECK(nr == doctest::Approx(na).epsilon(1e-12));
    }
}

TEST_CASE("shared subgraphs accumulate gradients once per path") {
    // loss = sum of (x + x), so dloss/dx = 2 everywhere.
    Mat x(2, 2);
    x.data() = {1.0, 2.0, 3.0, 4.0};
    Mat y = add(x, x);
    std::fill(y.grad().begin(), y.grad().end(), 1.0);
    backward({y});
    for (double g : x.grad()) CHECK(g == doctest::Approx(2.0));
}

TEST_CASE("multi-root backward covers the union graph") {
    Mat x(1, 3);
    x.data() = {0.5, -1.0, 2.0};
    Mat a = scale(x, 3.0);
    Mat b = mul(x, x);
    std::fill(a.grad().begin(), a.grad().end(), 1.0);
    std::fill(b.grad().begin(), b.grad().end(), 1.0);
    backward({a, b});
    // d(3x)/dx + d(x^2)/dx = 3 + 2x
    CHECK(x.grad()[0] == doctest::Approx(3.0 + 2 * 0.5));
    CHECK(x.grad()[1] == doctest::Approx(3.0 - 2.0));
    CHECK(x.grad()[2] == doctest::Approx(3.0 + 4.0));
}

TEST_CASE("shape violations throw") {
    Mat a(2, 3), b(2, 3), c(3, 2);
    CHECK_THROWS_AS(matmul(a, b), std::domain_error);
    CHECK_THROWS_AS(add(a, c), std::domain_error);
    CHECK_THROWS_AS(slice_cols(a, 2, 2), std::domain_error);
    CHECK_THROWS_AS(rope(Mat(2, 3)), std::domain_error);
    CHECK_THROWS_AS(gather_rows(a, {5}), std::domain_error);
}
