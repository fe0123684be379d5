#include <pybind11/functional.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "maskdiff/guidance.hpp"
#include "maskdiff/losses.hpp"
#include "maskdiff/oracle.hpp"
#include "maskdiff/sampler.hpp"
#include "maskdiff/score_net.hpp"
#include "maskdiff/synth.hpp"
#include "maskdiff/version.hpp"

namespace py = pybind11;
using namespace maskdiff;

namespace {

TokenGrid grid_from_rows(const std::vector<std::vector<int32_t>>& rows) {
    if (rows.empty() || rows[0].empty())
        throw std::domain_error("TokenGrid: rows must be a non-empty nested list");
    TokenGrid g(static_cast<int>(rows.size()), static_cast<int>(rows[0].size()));
    for (size_t l = 0; l < rows.size(); ++l) {
        if (rows[l].size() != rows[0].size())
            throw std::domain_error("TokenGrid: rows must have equal length");
        for (size_t p = 0; p < rows[l].size(); ++p)
            g.at(static_cast<int>(l), static_cast<int>(p)) = rows[l][p];
    }
    return g;
}

std::vector<std::vector<int32_t>> grid_rows(const TokenGrid& g) {
    std::vector<std::vector<int32_t>> rows(static_cast<size_t>(g.levels));
    for (int l = 0; l < g.levels; ++l) {
        rows[l].resize(static_cast<size_t>(g.length));
        for (int p = 0; p < g.length; ++p) rows[l][p] = g.at(l, p);
    }
    return rows;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "absorbing-state discrete diffusion over multi-level token grids";
    m.attr("__version__") = kCodeVersion;

    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    py::class_<NoiseSchedule>(m, "NoiseSchedule")
        .def(py::init<>())
        .def(py::init<double>(), py::arg("eps"))
        .def_readonly("eps", &NoiseSchedule::eps)
        .def("sigma_bar", &NoiseSchedule::sigma_bar, py::arg("t"))
        .def("sigma", &NoiseSchedule::sigma, py::arg("t"))
        .def("mask_prob", &NoiseSchedule::mask_prob, py::arg("t"))
        .def("keep_prob", &NoiseSchedule::keep_prob, py::arg("t"));

    py::class_<Vocab>(m, "Vocab")
        .def(py::init<int>(), py::arg("n_real"))
        .def_readonly("n_real", &Vocab::n_real)
        .def("mask_id", &Vocab::mask_id)
        .def("n_states", &Vocab::n_states);

    py::class_<TokenGrid>(m, "TokenGrid")
        .def(py::init(&grid_from_rows), py::arg("rows"))
        .def_readonly("levels", &TokenGrid::levels)
        .def_readonly("length", &TokenGrid::length)
        .def("at", [](const TokenGrid& g, int level, int pos) { return g.at(level, pos); },
             py::arg("level"), py::arg("pos"))
        .def("rows", &grid_rows)
        .def("count_mask", &TokenGrid::count_mask, py::arg("vocab"))
        .def("__eq__", [](const TokenGrid& a, const TokenGrid& b) { return a == b; });

    py::class_<ScoreField>(m, "ScoreField")
        .def(py::init<int, int, int, double>(), py::arg("levels"), py::arg("length"),
             py::arg("n_real"), py::arg("fill") = 1.0)
        .def_readonly("levels", &ScoreField::levels)
        .def_readonly("length", &ScoreField::length)
        .def_readonly("n_real", &ScoreField::n_real)
        .def("at", [](const ScoreField& f, int l, int p, int y) { return f.at(l, p, y); },
             py::arg("level"), py::arg("pos"), py::arg("token"))
        .def("set", [](ScoreField& f, int l, int p, int y, double v) { f.at(l, p, y) = v; },
             py::arg("level"), py::arg("pos"), py::arg("token"), py::arg("value"));

    py::class_<ConditionSet>(m, "ConditionSet")
        .def(py::init<>())
        .def_readwrite("identity", &ConditionSet::identity)
        .def_readwrite("emotion", &ConditionSet::emotion)
        .def_readwrite("text", &ConditionSet::text)
        .def("is_all_null", &ConditionSet::is_all_null)
        .def("num_present", &ConditionSet::num_present);

    py::class_<GuidanceWeights>(m, "GuidanceWeights")
        .def(py::init([](double w0, double w1, double w2, double w3) {
                 return GuidanceWeights{w0, w1, w2, w3};
             }),
             py::arg("w0") = 1.9, py::arg("w1") = 1.0, py::arg("w2") = 1.0, py::arg("w3") = 1.6)
        .def_readwrite("w0", &GuidanceWeights::w0)
        .def_readwrite("w1", &GuidanceWeights::w1)
        .def_readwrite("w2", &GuidanceWeights::w2)
        .def_readwrite("w3", &GuidanceWeights::w3);

    m.def(
        "forward_sample",
        [](const TokenGrid& x0, const NoiseSchedule& sched, double t, const Vocab& vocab,
           uint64_t seed) {
            Rng rng(seed);
            return forward_sample(x0, sched, t, vocab, rng);
        },
        py::arg("x0"), py::arg("sched"), py::arg("t"), py::arg("vocab"), py::arg("seed"));

    m.def(
        "dse_loss",
        [](const ScoreField& scores, const TokenGrid& x0, const TokenGrid& xt, double t,
           int max_level, const NoiseSchedule& sched, const Vocab& vocab) {
            const DseResult r = dse_loss(scores, x0, xt, t, max_level, sched, vocab);
            return py::make_tuple(r.value, r.grad);
        },
        py::arg("scores"), py::arg("x0"), py::arg("xt"), py::arg("t"), py::arg("max_level"),
        py::arg("sched"), py::arg("vocab"));

    m.def("curriculum_level", &curriculum_level, py::arg("epoch"), py::arg("max_levels"),
          py::arg("epochs_per_level") = 3);

    m.def(
        "condition_dropout",
        [](const ConditionSet& cond, uint64_t seed, double p_all, double p_each) {
            Rng rng(seed);
            return condition_dropout(cond, rng, p_all, p_each);
        },
        py::arg("cond"), py::arg("seed"), py::arg("p_all") = 0.1, py::arg("p_each") = 0.1);

    m.def(
        "align_loss",
        [](const std::vector<double>& a, const std::vector<double>& b) {
            const AlignResult r = align_loss(a, b);
            return py::make_tuple(r.value, r.grad_a);
        },
        py::arg("a"), py::arg("b"));

    m.def("epfg_compose", &epfg_compose, py::arg("s_u"), py::arg("s_cond"), py::arg("s_joint"),
          py::arg("w"));

    // synthetic task + exact references
    py::class_<SynthConfig>(m, "SynthConfig")
        .def(py::init<>())
        .def_readwrite("n_real", &SynthConfig::n_real)
        .def_readwrite("levels", &SynthConfig::levels)
        .def_readwrite("length", &SynthConfig::length)
        .def_readwrite("n_identities", &SynthConfig::n_identities)
        .def_readwrite("n_emotions", &SynthConfig::n_emotions)
        .def_readwrite("n_text_symbols", &SynthConfig::n_text_symbols)
        .def_readwrite("embed_dim", &SynthConfig::embed_dim)
        .def_readwrite("seed", &SynthConfig::seed);

    py::class_<DatasetRecord>(m, "DatasetRecord")
        .def_readonly("id", &DatasetRecord::id)
        .def_readonly("tokens", &DatasetRecord::tokens)
        .def_readonly("identity", &DatasetRecord::identity)
        .def_readonly("emotion", &DatasetRecord::emotion)
        .def_readonly("text", &DatasetRecord::text)
        .def_readonly("duration", &DatasetRecord::duration);

    m.def("gen_dataset", &gen_dataset, py::arg("cfg"), py::arg("n_records"));
    m.def("identity_anchors", &identity_anchors, py::arg("cfg"));

    py::class_<ToyDistribution>(m, "ToyDistribution")
        .def_readonly("levels", &ToyDistribution::levels)
        .def_readonly("length", &ToyDistribution::length)
        .def_readonly("support", &ToyDistribution::support)
        .def_readonly("probs", &ToyDistribution::probs)
        .def("p0", &ToyDistribution::p0, py::arg("x"))
        .def("size", &ToyDistribution::size);

    m.def(
        "conditional_toy_distribution",
        [](const SynthConfig& cfg, std::optional<int> identity, std::optional<int> emotion,
           std::optional<uint64_t> text_code) {
            return conditional_toy_distribution(cfg, identity, emotion, text_code);
        },
        py::arg("cfg"), py::arg("identity") = std::nullopt, py::arg("emotion") = std::nullopt,
        py::arg("text_code") = std::nullopt);

    m.def("exact_score_field", &exact_score_field, py::arg("p0"), py::arg("xt"), py::arg("sched"),
          py::arg("t"));

    py::class_<CachedExactScore>(m, "CachedExactScore")
        .def(py::init<ToyDistribution, NoiseSchedule>(), py::arg("p0"), py::arg("sched"))
        .def("__call__", &CachedExactScore::operator(), py::arg("grid"), py::arg("t"),
             py::arg("cond"));

    py::class_<SamplerConfig>(m, "SamplerConfig")
        .def(py::init([](int n_steps, uint64_t seed) {
                 SamplerConfig c;
                 c.n_steps = n_steps;
                 c.seed = seed;
                 return c;
             }),
             py::arg("n_steps") = 96, py::arg("seed") = 0)
        .def_readwrite("n_steps", &SamplerConfig::n_steps)
        .def_readwrite("seed", &SamplerConfig::seed);

    m.def(
        "sample_many",
        [](const ScoreSource& source, const ConditionSet& cond, int length, int levels,
           const GuidanceWeights& w, const SamplerConfig& cfg, const Vocab& vocab,
           const NoiseSchedule& sched, int n_chains) {
            return sample_many(source, cond, length, levels, w, cfg, vocab, sched, n_chains);
        },
        py::arg("source"), py::arg("cond"), py::arg("length"), py::arg("levels"), py::arg("w"),
        py::arg("cfg"), py::arg("vocab"), py::arg("sched"), py::arg("n_chains"));

    m.def("tv_distance", &tv_distance, py::arg("samples"), py::arg("p0"));

    // score network, desk scale
    py::class_<MMDiTConfig>(m, "MMDiTConfig")
        .def(py::init<>())
        .def_readwrite("n_blocks", &MMDiTConfig::n_blocks)
        .def_readwrite("hidden", &MMDiTConfig::hidden)
        .def_readwrite("n_heads", &MMDiTConfig::n_heads)
        .def_readwrite("max_levels", &MMDiTConfig::max_levels)
        .def_readwrite("n_real", &MMDiTConfig::n_real)
        .def_readwrite("id_dim", &MMDiTConfig::id_dim)
        .def_readwrite("n_emotions", &MMDiTConfig::n_emotions)
        .def_readwrite("n_text_symbols", &MMDiTConfig::n_text_symbols);

    py::class_<MMDiT>(m, "MMDiT")
        .def(py::init<const MMDiTConfig&, uint64_t>(), py::arg("cfg"), py::arg("seed"))
        .def("eval", &MMDiT::eval, py::arg("grid"), py::arg("t"), py::arg("cond"))
        .def("param_count", &MMDiT::param_count);
}
