#include "maskdiff/score_net.hpp"

#include <cmath>
#include <stdexcept>

#include "maskdiff/errors.hpp"
#include "maskdiff/rng.hpp"

namespace maskdiff {

void MMDiTConfig::validate() const {
    if (n_blocks < 1) throw std::domain_error("MMDiTConfig: n_blocks must be >= 1");
    if (hidden < 2 || hidden % 2 != 0)
        throw std::domain_error("MMDiTConfig: hidden must be even and >= 2");
    if (n_heads < 1 || hidden % n_heads != 0)
        throw std::domain_error("MMDiTConfig: hidden must be divisible by n_heads");
    if ((hidden / n_heads) % 2 != 0)
        throw std::domain_error("MMDiTConfig: head width must be even for rotary mixing");
    if (max_levels < 1 || max_levels > 12)
        throw std::domain_error("MMDiTConfig: max_levels must be in 1..12");
    if (n_real < 2) throw std::domain_error("MMDiTConfig: n_real must be >= 2");
    if (id_dim < 1 || n_emotions < 1 || n_text_symbols < 1)
        throw std::domain_error("MMDiTConfig: condition widths must be >= 1");
}

namespace {

Mat init_mat(int rows, int cols, Rng& rng, double scl) {
    Mat m(rows, cols);
    for (auto& v : m.data()) v = scl * rng.normal();
    return m;
}

Mat const_row(const std::vector<double>& v) {
    Mat m(1, static_cast<int>(v.size()));
    m.data() = v;
    return m;
}

Mat ones_row(int n) {
    Mat m(1, n);
    std::fill(m.data().begin(), m.data().end(), 1.0);
    return m;
}

// Multi-head attention. Queries come from `xq`, keys and values from `xkv`;
// rotary mixing is applied per head when `use_rope` is set.
Mat attention(const Mat& xq, const Mat& xkv, const Mat& wq, const Mat& wk, const Mat& wv,
              const Mat& wo, int n_heads, bool use_rope) {
    const int h = wq.cols();
    const int dh = h / n_heads;
    Mat q = matmul(xq, wq);
    Mat k = matmul(xkv, wk);
    Mat v = matmul(xkv, wv);
    std::vector<Mat> heads;
    for (int i = 0; i < n_heads; ++i) {
        Mat qi = slice_cols(q, i * dh, (i + 1) * dh);
        Mat ki = slice_cols(k, i * dh, (i + 1) * dh);
        Mat vi = slice_cols(v, i * dh, (i + 1) * dh);
        if (use_rope) {
            qi = rope(qi);
            ki = rope(ki);
        }
        Mat att = softmax_rows(scale(matmul(qi, transpose(ki)), 1.0 / std::sqrt(double(dh))));
        heads.push_back(matmul(att, vi));
    }
    return matmul(concat_cols(heads), wo);
}

Mat modulate(const Mat& x, const Mat& gamma, const Mat& beta) {
    return add_rowvec(mul_rowvec(layernorm_rows(x), add(ones_row(gamma.cols()), gamma)), beta);
}

}  // namespace

MMDiT::MMDiT(const MMDiTConfig& cfg, uint64_t seed) : cfg_(cfg), sched_(cfg.schedule_eps) {
    cfg_.validate();
    Rng rng(seed);
    const int h = cfg_.hidden;
    const double ws = 1.0 / std::sqrt(double(h));
    auto add_param = [&](const std::string& name, int rows, int cols, double scl) {
        params_.emplace_back(name, init_mat(rows, cols, rng, scl));
    };

    for (int l = 0; l < cfg_.max_levels; ++l)
        add_param("tok_emb." + std::to_string(l), cfg_.n_real + 1, h, 0.5);
    add_param("time.w", h, h, ws);
    add_param("time.b", 1, h, 0.0);
    add_param("id.w", cfg_.id_dim, h, 1.0 / std::sqrt(double(cfg_.id_dim)));
    add_param("id.b", 1, h, 0.0);
    add_param("id.null", 1, h, 0.5);
    add_param("emo.table", cfg_.n_emotions, h, 0.5);
    add_param("emo.null", 1, h, 0.5);
    add_param("text.table", cfg_.n_text_symbols, h, 0.5);
    add_param("text.null", 1, h, 0.5);
    add_param("cond.w", 3 * h, h, 1.0 / std::sqrt(3.0 * h));
    add_param("cond.b", 1, h, 0.0);

    for (int b = 0; b < cfg_.n_blocks; ++b) {
        const std::string pre = "block." + std::to_string(b) + ".";
        // Small modulation weights keep the residual path near identity at
        // initialization without silencing the condition entirely.
        add_param(pre + "ada.w", h, 6 * h, 0.02 * ws);
        add_param(pre + "ada.b", 1, 6 * h, 0.0);
        for (const char* n : {"attn.wq", "attn.wk", "attn.wv", "attn.wo"})
            add_param(pre + n, h, h, ws);
        for (const char* n : {"cross.wq", "cross.wk", "cross.wv", "cross.wo"})
            add_param(pre + n, h, h, ws);
        add_param(pre + "mlp.w1", h, 4 * h, ws);
        add_param(pre + "mlp.b1", 1, 4 * h, 0.0);
        add_param(pre + "mlp.w2", 4 * h, h, 1.0 / std::sqrt(4.0 * h));
        add_param(pre + "mlp.b2", 1, h, 0.0);
    }
    for (int l = 0; l < cfg_.max_levels; ++l) {
        const std::string pre = "head." + std::to_string(l) + ".";
        add_param(pre + "ada.w", h, 2 * h, 0.02 * ws);
        add_param(pre + "ada.b", 1, 2 * h, 0.0);
        add_param(pre + "out.w", h, cfg_.n_real, 0.02 * ws);
        add_param(pre + "out.b", 1, cfg_.n_real, 0.0);
    }
}

Mat MMDiT::p(const std::string& name) const {
    for (const auto& [n, m] : params_)
        if (n == name) return m;
    throw std::logic_error("MMDiT: unknown parameter " + name);
}

Mat MMDiT::param(const std::string& name) const { return p(name); }

size_t MMDiT::param_count() const {
    size_t n = 0;
    for (const auto& [name, m] : params_) n += m.data().size();
    return n;
}

void MMDiT::zero_grad() {
    for (auto& [name, m] : params_) m.zero_grad();
}

void MMDiT::check_finite() const {
    for (const auto& [name, m] : params_)
        for (double v : m.data())
            if (!std::isfinite(v)) throw NumericError("non-finite parameter in " + name);
}

ForwardTrace MMDiT::forward(const TokenGrid& grid, double t, const ConditionSet& cond) const {
    const int h = cfg_.hidden;
    const int L = grid.levels;
    const int d = grid.length;
    if (L < 1 || L > cfg_.max_levels)
        throw std::domain_error("MMDiT: grid level count exceeds the configured maximum");
    Vocab vocab(cfg_.n_real);
    grid.check_ids(vocab);
    sched_.check_t(t);
    check_finite();

    // Token stream: per-level embeddings averaged into one sequence.
    Mat x;
    for (int l = 0; l < L; ++l) {
        std::vector<int> idx(d);
        for (int pos = 0; pos < d; ++pos) idx[pos] = grid.at(l, pos);
        Mat e = gather_rows(p("tok_emb." + std::to_string(l)), idx);
        x = (l == 0) ? e : add(x, e);
    }
    x = scale(x, 1.0 / L);

    // Pooled condition from identity, emotion and corruption level.
    const double sb = sched_.sigma_bar(t);
    std::vector<double> feat(h);
    for (int i = 0; i < h / 2; ++i) {
        const double w = 100.0 * std::pow(10000.0, -2.0 * i / h);
        feat[2 * i] = std::sin(sb * w);
        feat[2 * i + 1] = std::cos(sb * w);
    }
    Mat time_h = add_rowvec(matmul(const_row(feat), p("time.w")), p("time.b"));

    Mat id_h;
    if (cond.identity) {
        if (static_cast<int>(cond.identity->size()) != cfg_.id_dim)
            throw std::domain_error("MMDiT: identity embedding width mismatch");
        id_h = add_rowvec(matmul(const_row(*cond.identity), p("id.w")), p("id.b"));
    } else {
        id_h = p("id.null");
    }

    Mat emo_h;
    if (cond.emotion) {
        if (*cond.emotion < 0 || *cond.emotion >= cfg_.n_emotions)
            throw std::domain_error("MMDiT: emotion label out of range");
        emo_h = gather_rows(p("emo.table"), {*cond.emotion});
    } else {
        emo_h = p("emo.null");
    }

    Mat text_h;
    if (cond.text) {
        std::vector<int> sym(cond.text->begin(), cond.text->end());
        for (int s : sym)
            if (s < 0 || s >= cfg_.n_text_symbols)
                throw std::domain_error("MMDiT: text symbol out of range");
        text_h = gather_rows(p("text.table"), sym);
    } else {
        text_h = p("text.null");
    }

    Mat c = add_rowvec(matmul(concat_cols({id_h, emo_h, time_h}), p("cond.w")), p("cond.b"));
    Mat c_act = silu(c);

    for (int b = 0; b < cfg_.n_blocks; ++b) {
        const std::string pre = "block." + std::to_string(b) + ".";
        Mat ada = add_rowvec(matmul(c_act, p(pre + "ada.w")), p(pre + "ada.b"));
        AdaLNParams m{slice_cols(ada, 0, h),         slice_cols(ada, h, 2 * h),
                      slice_cols(ada, 2 * h, 3 * h), slice_cols(ada, 3 * h, 4 * h),
                      slice_cols(ada, 4 * h, 5 * h), slice_cols(ada, 5 * h, 6 * h)};

        Mat attn_in = modulate(x, m.gamma1, m.beta1);
        Mat attn_out = attention(attn_in, attn_in, p(pre + "attn.wq"), p(pre + "attn.wk"),
                                 p(pre + "attn.wv"), p(pre + "attn.wo"), cfg_.n_heads, false);
        x = add(x, mul_rowvec(attn_out, m.alpha1));

        // Rotary mixing only here: positions enter through the text stream.
        Mat cross_out =
            attention(layernorm_rows(x), text_h, p(pre + "cross.wq"), p(pre + "cross.wk"),
                      p(pre + "cross.wv"), p(pre + "cross.wo"), cfg_.n_heads, true);
        x = add(x, cross_out);

        Mat mlp_in = modulate(x, m.gamma2, m.beta2);
        Mat mid = silu(add_rowvec(matmul(mlp_in, p(pre + "mlp.w1")), p(pre + "mlp.b1")));
        Mat mlp_out = add_rowvec(matmul(mid, p(pre + "mlp.w2")), p(pre + "mlp.b2"));
        x = add(x, mul_rowvec(mlp_out, m.alpha2));
    }

    ForwardTrace trace;
    trace.scores = ScoreField(L, d, cfg_.n_real);
    for (int l = 0; l < L; ++l) {
        const std::string pre = "head." + std::to_string(l) + ".";
        Mat hada = add_rowvec(matmul(c_act, p(pre + "ada.w")), p(pre + "ada.b"));
        Mat hx = modulate(x, slice_cols(hada, 0, h), slice_cols(hada, h, 2 * h));
        Mat z = add_rowvec(matmul(hx, p(pre + "out.w")), p(pre + "out.b"));
        Mat s = exp_elem(z);
        for (int pos = 0; pos < d; ++pos)
            for (int y = 0; y < cfg_.n_real; ++y) trace.scores.at(l, pos, y) = s.at(pos, y);
        trace.score_nodes.push_back(s);
    }
    trace.scores.check_positive();
    return trace;
}

ScoreField MMDiT::eval(const TokenGrid& grid, double t, const ConditionSet& cond) const {
    return forward(grid, t, cond).scores;
}

ScoreField mmdit_forward(const MMDiT& model, const TokenGrid& grid, double t,
                         const ConditionSet& cond) {
    return model.eval(grid, t, cond);
}

void backward(MMDiT& model, ForwardTrace& trace, const ScoreField& upstream) {
    if (trace.score_nodes.empty()) throw std::domain_error("backward: empty trace");
    if (!upstream.same_shape(trace.scores))
        throw std::domain_error("backward: upstream gradient shape mismatch");
    const int d = trace.scores.length;
    const int n_real = trace.scores.n_real;
    for (size_t l = 0; l < trace.score_nodes.size(); ++l) {
        Mat& s = trace.score_nodes[l];
        for (int pos = 0; pos < d; ++pos)
            for (int y = 0; y < n_real; ++y)
                s.grad()[size_t(pos) * n_real + y] = upstream.at(static_cast<int>(l), pos, y);
    }
    maskdiff::backward(trace.score_nodes);
    for (const auto& [name, m] : model.parameters())
        for (double g : m.grad())
            if (!std::isfinite(g)) throw NumericError("non-finite gradient in " + name);
}

}  // namespace maskdiff
