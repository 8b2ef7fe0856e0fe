#pragma once

// Architecture-adapted integrated gradients over FFN neurons: per-word
// baseline sentences, right-Riemann path integrals with one clamped unit at a
// time, aggregation/normalisation, and dynamic-threshold neuron selection.

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "knlab/model.hpp"

namespace knlab {

enum class BaselineMode { architecture_adapted, zero };
enum class RiemannCoeff { standard, paper };

inline std::string_view to_string(BaselineMode m) { return m == BaselineMode::zero ? "zero" : "adapted"; }
inline std::string_view to_string(RiemannCoeff c) { return c == RiemannCoeff::paper ? "paper" : "standard"; }

inline BaselineMode parse_baseline_mode(std::string_view s) {
    if (s == "adapted" || s == "architecture-adapted") return BaselineMode::architecture_adapted;
    if (s == "zero" || s == "zero-baseline") return BaselineMode::zero;
    throw ConfigError("unknown baseline mode '" + std::string(s) + "' (expected adapted or zero)");
}

inline RiemannCoeff parse_riemann_coeff(std::string_view s) {
    if (s == "standard") return RiemannCoeff::standard;
    if (s == "paper") return RiemannCoeff::paper;
    throw ConfigError("unknown Riemann coefficient '" + std::string(s) + "' (expected standard or paper)");
}

struct AttributionConfig {
    int riemann_steps = 20;
    std::map<std::string, double> tau_per_language;
    BaselineMode baseline_mode = BaselineMode::architecture_adapted;
    // standard: (w_bar - w') / N; paper: w_bar / N. Equal when w' = 0.
    RiemannCoeff coeff = RiemannCoeff::standard;

    double tau(const std::string& lang) const {
        auto it = tau_per_language.find(lang);
        if (it == tau_per_language.end()) throw ConfigError("no tau configured for language '" + lang + "'");
        const double t = it->second;
        if (!(t > 0.0 && t < 1.0))
            throw ConfigError("tau for language '" + lang + "' must lie in (0, 1), got " + std::to_string(t));
        return t;
    }

    void validate(const std::vector<std::string>& languages) const {
        if (riemann_steps < 1) throw ConfigError("riemann_steps must be >= 1");
        for (const auto& l : languages) (void)tau(l);
    }
};

/// Attribution scores for one query, dense over (layer, unit).
struct AttributionMap {
    std::string query_id;
    Mat scores;
    bool normalized = false;

    double score(NeuronId id) const { return scores(id.layer, id.unit); }
};

struct KnowledgeNeuronSet {
    std::string query_id;
    std::string fact_id;
    std::string lang_id;
    std::set<NeuronId> neurons;
    double threshold_used = 0.0;
    double max_score = 0.0;
};

// ---------------------------------------------------------------------------
// Baselines

/// Word positions that may be replaced: everything except the blank /
/// prediction position.
inline std::vector<int> eligible_words(const ClozeQuery& q) {
    std::vector<int> out;
    for (int i = 0; i < static_cast<int>(q.tokens.size()); ++i)
        if (i != q.blank_position) out.push_back(i);
    return out;
}

/// Copy of `q` with word `i` replaced by <mask> (auto-encoding) or <eos>
/// (auto-regressive). Token ids 1 and 2 are the shared special tokens.
inline ClozeQuery build_baseline(const ClozeQuery& q, int word_index) {
    if (word_index < 0 || word_index >= static_cast<int>(q.tokens.size()))
        throw PreconditionError("word index " + std::to_string(word_index) + " outside query '" + q.id + "'");
    if (word_index == q.blank_position)
        throw PreconditionError("word index " + std::to_string(word_index) + " is the blank of '" + q.id + "'");
    ClozeQuery b = q;
    const Vocabulary v;
    b.tokens[static_cast<std::size_t>(word_index)] = q.architecture == Architecture::auto_encoding ? v.mask_id() : v.eos_id();
    b.id = q.id + "#baseline" + std::to_string(word_index);
    return b;
}

// ---------------------------------------------------------------------------
// Riemann approximation

/// k-th right-Riemann point (k = 1..N) on the path w' -> w_bar.
inline double riemann_point(double w_bar, double w_prime, int k, int steps) {
    return w_prime + (static_cast<double>(k) / static_cast<double>(steps)) * (w_bar - w_prime);
}

/// Coefficient times the sum of path gradients.
inline double riemann_combine(double w_bar, double w_prime, int steps, RiemannCoeff coeff, double grad_sum) {
    const double lead = coeff == RiemannCoeff::standard ? (w_bar - w_prime) : w_bar;
    return lead / static_cast<double>(steps) * grad_sum;
}

/// Integrated gradient of a scalar function given its derivative.
template <class Derivative>
double integrated_gradient(Derivative&& dfdw, double w_bar, double w_prime, int steps,
                           RiemannCoeff coeff = RiemannCoeff::standard) {
    if (steps < 1) throw PreconditionError("integrated_gradient needs at least one step");
    double sum = 0.0;
    for (int k = 1; k <= steps; ++k) sum += dfdw(riemann_point(w_bar, w_prime, k, steps));
    return riemann_combine(w_bar, w_prime, steps, coeff, sum);
}

namespace detail {

/// Per-neuron integrated gradients of the gold probability along the paths
/// baseline[l, j] -> natural[l, j], one clamped unit at a time, evaluated on
/// the original query's forward state.
inline Mat path_attribution(const Model& m, const ForwardTrace& base, int gold, const Mat& natural, const Mat& baseline,
                            int steps, RiemannCoeff coeff) {
    const int L = m.config.n_layers, n = m.config.ffn_dim;
    Mat out = Mat::Zero(L, n);
    for (int l = 0; l < L; ++l) {
        std::vector<int> units;
        std::vector<double> values;
        std::vector<int> touched;
        for (int j = 0; j < n; ++j) {
            const double wb = natural(l, j), wp = baseline(l, j);
            if (wb == wp) continue; // zero-length path
            touched.push_back(j);
            for (int k = 1; k <= steps; ++k) {
                units.push_back(j);
                values.push_back(riemann_point(wb, wp, k, steps));
            }
        }
        if (units.empty()) continue;
        const auto eval = clamped_unit_gradients(m, base, gold, l, units, values);
        std::size_t r = 0;
        for (int j : touched) {
            double sum = 0.0;
            for (int k = 0; k < steps; ++k, ++r) sum += eval.grad[r];
            if (!std::isfinite(sum)) throw NumericError("non-finite gradient for neuron " + to_string(NeuronId{l, j}));
            out(l, j) = riemann_combine(natural(l, j), baseline(l, j), steps, coeff, sum);
        }
    }
    return out;
}

} // namespace detail

/// Attr_i for every neuron: integrated gradients from the activations under
/// the word-i baseline sentence to those under the query itself.
inline Mat attribute_word(const Model& m, const ClozeQuery& q, int word_index, int steps,
                          RiemannCoeff coeff = RiemannCoeff::standard) {
    check_query(m, q);
    if (steps < 1) throw PreconditionError("attribute_word needs at least one Riemann step");
    const auto baseline_q = build_baseline(q, word_index);
    const auto base = run_forward(m, q.tokens, q.blank_position);
    const auto natural = snapshot_at(base, q.blank_position).values;
    const auto baseline = record_activations(m, baseline_q).values;
    return detail::path_attribution(m, base, q.gold_token, natural, baseline, steps, coeff);
}

/// Zero-vector baseline over the whole query (comparison mode).
inline Mat attribute_zero_baseline(const Model& m, const ClozeQuery& q, int steps,
                                   RiemannCoeff coeff = RiemannCoeff::standard) {
    check_query(m, q);
    if (steps < 1) throw PreconditionError("attribute_zero_baseline needs at least one Riemann step");
    const auto base = run_forward(m, q.tokens, q.blank_position);
    const auto natural = snapshot_at(base, q.blank_position).values;
    const Mat zero = Mat::Zero(natural.rows(), natural.cols());
    return detail::path_attribution(m, base, q.gold_token, natural, zero, steps, coeff);
}

/// Sums per-word maps and divides by the grand total.
inline AttributionMap aggregate_normalize(const std::string& query_id, const std::vector<Mat>& per_word) {
    if (per_word.empty()) throw PreconditionError("aggregate_normalize: no per-word maps for '" + query_id + "'");
    Mat total = per_word.front();
    for (std::size_t i = 1; i < per_word.size(); ++i) {
        if (per_word[i].rows() != total.rows() || per_word[i].cols() != total.cols())
            throw PreconditionError("aggregate_normalize: per-word maps of '" + query_id + "' differ in shape");
        total += per_word[i];
    }
    const double denom = total.sum();
    if (!std::isfinite(denom) || denom == 0.0)
        throw NumericError("aggregate_normalize: zero or non-finite attribution total for '" + query_id + "'");
    return {query_id, total / denom, true};
}

inline AttributionMap attribute_query(const Model& m, const ClozeQuery& q, const AttributionConfig& cfg) {
    if (cfg.riemann_steps < 1) throw ConfigError("riemann_steps must be >= 1");
    std::vector<Mat> maps;
    if (cfg.baseline_mode == BaselineMode::zero) {
        maps.push_back(attribute_zero_baseline(m, q, cfg.riemann_steps, cfg.coeff));
    } else {
        for (int i : eligible_words(q)) maps.push_back(attribute_word(m, q, i, cfg.riemann_steps, cfg.coeff));
    }
    return aggregate_normalize(q.id, maps);
}

/// T_k = max score * tau_k; keeps neurons strictly above T_k.
inline KnowledgeNeuronSet select_knowledge_neurons(const AttributionMap& attr, const std::string& lang,
                                                   const AttributionConfig& cfg) {
    if (!attr.normalized) throw PreconditionError("select_knowledge_neurons needs a normalized map");
    const double tau = cfg.tau(lang);
    KnowledgeNeuronSet out;
    out.query_id = attr.query_id;
    out.lang_id = lang;
    out.max_score = attr.scores.maxCoeff();
    out.threshold_used = out.max_score * tau;
    for (Eigen::Index l = 0; l < attr.scores.rows(); ++l)
        for (Eigen::Index j = 0; j < attr.scores.cols(); ++j)
            if (attr.scores(l, j) > out.threshold_used) out.neurons.insert({static_cast<int>(l), static_cast<int>(j)});
    return out;
}

// ---------------------------------------------------------------------------
// Layer-interpolation mode: every unit of one layer moves along its path
// jointly, so the per-unit attributions of that layer must sum to
// F(natural layer) - F(baseline layer).

struct LayerPathAttribution {
    Eigen::RowVectorXd scores;
    double f_natural = 0.0;
    double f_baseline = 0.0;
};

inline LayerPathAttribution attribute_layer_joint(const Model& m, const ClozeQuery& q, int word_index, int layer,
                                                  int steps) {
    check_query(m, q);
    if (layer < 0 || layer >= m.config.n_layers) throw PreconditionError("layer out of range");
    const auto natural = record_activations(m, q).values.row(layer).eval();
    const auto baseline = record_activations(m, build_baseline(q, word_index)).values.row(layer).eval();
    const int n = m.config.ffn_dim;

    auto clamp_layer = [&](const Eigen::RowVectorXd& values) {
        std::map<NeuronId, double> c;
        for (int j = 0; j < n; ++j) c[{layer, j}] = values[j];
        return c;
    };
    LayerPathAttribution out;
    Eigen::RowVectorXd grad_sum = Eigen::RowVectorXd::Zero(n);
    for (int k = 1; k <= steps; ++k) {
        const double alpha = static_cast<double>(k) / static_cast<double>(steps);
        const Eigen::RowVectorXd point = baseline + alpha * (natural - baseline);
        grad_sum += grad_answer_prob_wrt_neurons(m, q, clamp_layer(point)).row(layer);
    }
    out.scores = ((natural - baseline).array() * grad_sum.array()).matrix() / static_cast<double>(steps);
    auto iv_nat = Intervention::clamp(clamp_layer(natural));
    auto iv_base = Intervention::clamp(clamp_layer(baseline));
    out.f_natural = gold_probability(m, q, &iv_nat);
    out.f_baseline = gold_probability(m, q, &iv_base);
    return out;
}

// ---------------------------------------------------------------------------
// Records

inline nlohmann::json neurons_to_json(const std::set<NeuronId>& s) {
    nlohmann::json arr = nlohmann::json::array();
    for (auto id : s) arr.push_back({id.layer, id.unit});
    return arr;
}

inline nlohmann::json to_json(const KnowledgeNeuronSet& s) {
    const auto neurons = neurons_to_json(s.neurons);
    return {{"query_id", s.query_id},
            {"fact_id", s.fact_id},
            {"lang", s.lang_id},
            {"threshold", s.threshold_used},
            {"max_score", s.max_score},
            {"neurons", neurons}};
}

inline std::set<NeuronId> neurons_from_json(const nlohmann::json& arr) {
    std::set<NeuronId> out;
    for (const auto& n : arr) out.insert({n.at(0).get<int>(), n.at(1).get<int>()});
    return out;
}

inline KnowledgeNeuronSet kn_set_from_json(const nlohmann::json& j) {
    KnowledgeNeuronSet s;
    s.query_id = j.at("query_id").get<std::string>();
    s.fact_id = j.at("fact_id").get<std::string>();
    s.lang_id = j.at("lang").get<std::string>();
    s.threshold_used = j.at("threshold").get<double>();
    s.max_score = j.at("max_score").get<double>();
    s.neurons = neurons_from_json(j.at("neurons"));
    return s;
}

/// Sparse record: the top entries of the map plus summary numbers.
inline nlohmann::json to_json(const AttributionMap& a, std::size_t top = 64) {
    std::vector<std::pair<double, NeuronId>> entries;
    for (Eigen::Index l = 0; l < a.scores.rows(); ++l)
        for (Eigen::Index j = 0; j < a.scores.cols(); ++j)
            entries.push_back({a.scores(l, j), {static_cast<int>(l), static_cast<int>(j)}});
    std::stable_sort(entries.begin(), entries.end(), [](const auto& x, const auto& y) { return x.first > y.first; });
    nlohmann::json topj = nlohmann::json::array();
    for (std::size_t i = 0; i < std::min(top, entries.size()); ++i)
        topj.push_back({entries[i].second.layer, entries[i].second.unit, entries[i].first});
    return {{"query_id", a.query_id}, {"normalized", a.normalized}, {"sum", a.scores.sum()}, {"top", topj}};
}

} // namespace knlab
