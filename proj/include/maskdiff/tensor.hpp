#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <vector>

namespace maskdiff {

// Reverse-mode autodiff over dense row-major double matrices. Each op builds
// a node holding data, a grad buffer and a closure that scatters the node's
// grad into its parents. backward() topo-sorts from the given roots, whose
// grads must be seeded by the caller.
struct MatNode {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;
    std::vector<double> grad;
    std::vector<std::shared_ptr<MatNode>> parents;
    std::function<void()> backward_fn;

    MatNode(int r, int c) : rows(r), cols(c), data(size_t(r) * c, 0.0), grad(size_t(r) * c, 0.0) {}
    double& at(int r, int c) { return data[size_t(r) * cols + c]; }
    double at(int r, int c) const { return data[size_t(r) * cols + c]; }
    size_t size() const { return data.size(); }
};

struct Mat {
    std::shared_ptr<MatNode> node;

    Mat() = default;
    Mat(int rows, int cols) : node(std::make_shared<MatNode>(rows, cols)) {}

    int rows() const { return node->rows; }
    int cols() const { return node->cols; }
    double& at(int r, int c) { return node->at(r, c); }
    double at(int r, int c) const { return node->at(r, c); }
    std::vector<double>& data() { return node->data; }
    const std::vector<double>& data() const { return node->data; }
    std::vector<double>& grad() { return node->grad; }
    const std::vector<double>& grad() const { return node->grad; }
    void zero_grad() { std::fill(node->grad.begin(), node->grad.end(), 0.0); }
};

// a (m×k) times b (k×n)
Mat matmul(const Mat& a, const Mat& b);
Mat transpose(const Mat& a);
Mat add(const Mat& a, const Mat& b);            // same shape
Mat sub(const Mat& a, const Mat& b);
Mat mul(const Mat& a, const Mat& b);            // elementwise
Mat add_rowvec(const Mat& a, const Mat& row);   // row is 1×n, broadcast over rows
Mat mul_rowvec(const Mat& a, const Mat& row);
Mat scale(const Mat& a, double k);
Mat exp_elem(const Mat& a);
Mat silu(const Mat& a);
Mat gelu(const Mat& a);
Mat softmax_rows(const Mat& a);
Mat layernorm_rows(const Mat& a, double eps = 1e-5);
Mat concat_cols(const std::vector<Mat>& parts);
Mat slice_cols(const Mat& a, int begin, int end);
Mat mean_rows(const Mat& a);                    // 1×n of column means
// Rotary position mixing: row p has its (2i, 2i+1) pairs rotated by angle
// p * base^(-2i/cols). Orthogonal per row, so backward is the reverse spin.
Mat rope(const Mat& a, double base = 10000.0);
// Gather rows of `table` by index; gradient scatter-adds into the table.
Mat gather_rows(const Mat& table, const std::vector<int>& idx);

// Run reverse-mode accumulation from pre-seeded roots over the union DAG.
void backward(const std::vector<Mat>& roots);

}  // namespace maskdiff
