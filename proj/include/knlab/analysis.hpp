#pragma once

// Set-level analysis of located neurons: cross-language intersection,
// degenerate (pairwise redundant) neurons, and per-relation DKN banks.

#include <algorithm>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "knlab/attribution.hpp"

namespace knlab {

struct LiknSet {
    std::string fact_id;
    std::set<NeuronId> neurons;
    std::vector<KnowledgeNeuronSet> sources;
};

/// Neurons shared by every language's set for one fact. Empty is allowed.
inline LiknSet intersect_languages(const std::vector<KnowledgeNeuronSet>& sets) {
    if (sets.size() < 2) throw PreconditionError("intersect_languages: need at least two languages");
    LiknSet out;
    out.fact_id = sets.front().fact_id;
    out.neurons = sets.front().neurons;
    for (const auto& s : sets) {
        if (s.fact_id != out.fact_id)
            throw PreconditionError("intersect_languages: mixed facts '" + out.fact_id + "' and '" + s.fact_id + "'");
        std::set<NeuronId> keep;
        std::set_intersection(out.neurons.begin(), out.neurons.end(), s.neurons.begin(), s.neurons.end(),
                              std::inserter(keep, keep.end()));
        out.neurons = std::move(keep);
    }
    out.sources = sets;
    return out;
}

struct DknConfig {
    double t_low = 0.05;
    double t_high = 0.30;

    void validate() const {
        if (!(t_low >= 0.0 && t_low < t_high && t_high <= 1.0))
            throw ConfigError("DKN thresholds need 0 <= t_low < t_high <= 1");
    }
};

using NeuronPair = std::pair<NeuronId, NeuronId>; // first < second

inline NeuronPair make_pair_sorted(NeuronId a, NeuronId b) { return a < b ? NeuronPair{a, b} : NeuronPair{b, a}; }

struct DknSet {
    std::string query_id;
    std::string fact_id;
    std::string lang_id;
    std::string relation;
    std::set<NeuronPair> pairs;
    std::set<NeuronId> candidates; // units whose single removal stays within t_low
    double base_prob = 0.0;

    std::set<NeuronId> neurons() const {
        std::set<NeuronId> out;
        for (const auto& [a, b] : pairs) {
            out.insert(a);
            out.insert(b);
        }
        return out;
    }
};

/// Gold probability with `suppressed` zeroed at every position. The set must
/// be drawn from `kn_set`; an empty set is the unedited model.
inline double prob_with_suppressed(const Model& m, const ClozeQuery& q, const std::set<NeuronId>& kn_set,
                                   const std::set<NeuronId>& suppressed) {
    for (auto id : suppressed)
        if (!kn_set.count(id))
            throw PreconditionError("prob_with_suppressed: " + to_string(id) + " is not in the knowledge-neuron set");
    if (suppressed.empty()) return gold_probability(m, q);
    const auto iv = Intervention::suppress(suppressed);
    return gold_probability(m, q, &iv);
}

/// Two passes: keep units whose removal alone costs at most t_low, then
/// report candidate pairs whose joint removal costs more than t_high.
/// `prob(S)` must return the gold probability with S suppressed.
template <class ProbFn>
DknSet detect_degenerate(const std::set<NeuronId>& kn_set, ProbFn&& prob, const DknConfig& cfg) {
    cfg.validate();
    if (kn_set.empty()) throw PreconditionError("detect_degenerate: empty knowledge-neuron set");
    DknSet out;
    out.base_prob = prob(std::set<NeuronId>{});
    for (auto n : kn_set)
        if (out.base_prob - prob(std::set<NeuronId>{n}) <= cfg.t_low) out.candidates.insert(n);
    const std::vector<NeuronId> pd(out.candidates.begin(), out.candidates.end());
    for (std::size_t a = 0; a < pd.size(); ++a)
        for (std::size_t b = a + 1; b < pd.size(); ++b)
            if (out.base_prob - prob(std::set<NeuronId>{pd[a], pd[b]}) > cfg.t_high) out.pairs.insert({pd[a], pd[b]});
    return out;
}

inline DknSet detect_degenerate(const Model& m, const ClozeQuery& q, const std::set<NeuronId>& kn_set,
                                const DknConfig& cfg) {
    auto out = detect_degenerate(
        kn_set, [&](const std::set<NeuronId>& s) { return prob_with_suppressed(m, q, kn_set, s); }, cfg);
    out.query_id = q.id;
    out.fact_id = q.fact_id;
    out.lang_id = q.lang_id;
    out.relation = q.relation;
    return out;
}

/// Neurons present in the DKN pairs of at least ceil(t * |sets|) queries.
/// Each query counts a neuron once however many of its pairs contain it.
inline std::set<NeuronId> aggregate_dkn_bank(const std::vector<DknSet>& sets, double t_percent) {
    if (sets.empty()) throw PreconditionError("aggregate_dkn_bank: no DKN sets");
    if (!(t_percent > 0.0 && t_percent <= 1.0)) throw ConfigError("t_percent must lie in (0, 1]");
    // Guard against products like 0.3 * 10 landing just above an integer.
    const double raw = t_percent * static_cast<double>(sets.size());
    const auto cutoff = static_cast<std::size_t>(std::ceil(raw - 1e-9));
    std::map<NeuronId, std::size_t> counts;
    for (const auto& s : sets)
        for (auto id : s.neurons()) ++counts[id];
    std::set<NeuronId> bank;
    for (const auto& [id, c] : counts)
        if (c >= cutoff) bank.insert(id);
    return bank;
}

// ---------------------------------------------------------------------------
// Serialisation

inline nlohmann::json to_json(const LiknSet& s) {
    nlohmann::json langs = nlohmann::json::array();
    for (const auto& src : s.sources) langs.push_back(src.lang_id);
    return {{"fact_id", s.fact_id}, {"languages", langs}, {"neurons", neurons_to_json(s.neurons)}};
}

inline nlohmann::json to_json(const DknSet& s) {
    nlohmann::json pairs = nlohmann::json::array();
    for (const auto& [a, b] : s.pairs) pairs.push_back({{a.layer, a.unit}, {b.layer, b.unit}});
    return {{"query_id", s.query_id},     {"fact_id", s.fact_id},
            {"lang", s.lang_id},          {"relation", s.relation},
            {"base_prob", s.base_prob},   {"candidates", neurons_to_json(s.candidates)},
            {"pairs", pairs}};
}

inline DknSet dkn_set_from_json(const nlohmann::json& j) {
    DknSet s;
    s.query_id = j.at("query_id").get<std::string>();
    s.fact_id = j.at("fact_id").get<std::string>();
    s.lang_id = j.at("lang").get<std::string>();
    s.relation = j.at("relation").get<std::string>();
    s.base_prob = j.at("base_prob").get<double>();
    s.candidates = neurons_from_json(j.at("candidates"));
    for (const auto& p : j.at("pairs"))
        s.pairs.insert(make_pair_sorted({p[0][0].get<int>(), p[0][1].get<int>()}, {p[1][0].get<int>(), p[1][1].get<int>()}));
    return s;
}

} // namespace knlab
