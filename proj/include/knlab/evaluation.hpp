#pragma once

// Editing success rate, cross-lingual editing protocols, and DKN-based fact
// checking with precision/recall/F1.

#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "knlab/analysis.hpp"

namespace knlab {

enum class EditKind { suppress, enhance };
enum class TargetKind { relevant, irrelevant };

inline std::string_view to_string(EditKind k) { return k == EditKind::suppress ? "suppress" : "enhance"; }

struct EditOutcome {
    std::string query_id;
    EditKind mode = EditKind::suppress;
    TargetKind target_kind = TargetKind::relevant;
    double prob_before = 0.0;
    double prob_after = 0.0;
    double delta = 0.0;
};

struct ExclusionRule {
    bool drop_unmastered = true;
    double top_fraction = 0.05; // of the highest relevant and irrelevant deltas

    std::string describe() const {
        std::string s = drop_unmastered ? "unmastered queries dropped; " : "";
        return s + "top " + std::to_string(top_fraction * 100.0).substr(0, 4) +
               "% of relevant and of irrelevant deltas dropped";
    }
};

/// Ratio status: `finite`, `infinite` (no irrelevant change, some relevant
/// change) or `undefined` (no change at all, or nothing left to average).
enum class RatioStatus { finite, infinite, undefined };

inline std::string_view to_string(RatioStatus s) {
    switch (s) {
    case RatioStatus::finite: return "finite";
    case RatioStatus::infinite: return "infinite";
    case RatioStatus::undefined: return "undefined";
    }
    return "undefined";
}

struct ModeSR {
    double sr = 0.0;
    RatioStatus status = RatioStatus::undefined;
    double mean_relevant = 0.0;
    double mean_irrelevant = 0.0;
    int n_included = 0;
    int n_excluded = 0;
};

struct SRReport {
    ModeSR suppress;
    ModeSR enhance;
    double sr_total = 0.0;
    RatioStatus total_status = RatioStatus::undefined;
    std::string exclusion_rule;
    int n_skipped = 0; // queries without a usable neuron set
    std::vector<EditOutcome> outcomes;
};

/// Per-query deltas for one edit mode.
struct QueryDeltas {
    std::string query_id;
    bool mastered = true;
    double relevant = 0.0;
    double irrelevant = 0.0;
};

inline ModeSR ratio_of_means(double rel_sum, double irr_sum, int n) {
    ModeSR r;
    r.n_included = n;
    if (n == 0) return r;
    r.mean_relevant = rel_sum / n;
    r.mean_irrelevant = irr_sum / n;
    if (r.mean_irrelevant > 0.0) {
        r.sr = r.mean_relevant / r.mean_irrelevant;
        r.status = RatioStatus::finite;
    } else if (r.mean_relevant > 0.0) {
        r.sr = std::numeric_limits<double>::infinity();
        r.status = RatioStatus::infinite;
    }
    return r;
}

/// Applies the exclusion rule, then SR = mean relevant / mean irrelevant.
inline ModeSR mode_success_rate(std::vector<QueryDeltas> rows, const ExclusionRule& rule) {
    std::sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) { return a.query_id < b.query_id; });
    const int total = static_cast<int>(rows.size());
    if (rule.drop_unmastered)
        rows.erase(std::remove_if(rows.begin(), rows.end(), [](const auto& r) { return !r.mastered; }), rows.end());
    const auto k = static_cast<std::size_t>(std::floor(rule.top_fraction * static_cast<double>(rows.size()) + 1e-9));
    std::set<std::string> extreme;
    if (k > 0) {
        auto mark = [&](auto key) {
            std::vector<const QueryDeltas*> order;
            for (const auto& r : rows) order.push_back(&r);
            std::stable_sort(order.begin(), order.end(), [&](auto* a, auto* b) { return key(*a) > key(*b); });
            for (std::size_t i = 0; i < k; ++i) extreme.insert(order[i]->query_id);
        };
        mark([](const QueryDeltas& r) { return r.relevant; });
        mark([](const QueryDeltas& r) { return r.irrelevant; });
    }
    double rel = 0.0, irr = 0.0;
    int n = 0;
    for (const auto& r : rows) {
        if (extreme.count(r.query_id)) continue;
        rel += r.relevant;
        irr += r.irrelevant;
        ++n;
    }
    auto out = ratio_of_means(rel, irr, n);
    out.n_excluded = total - n;
    return out;
}

inline void finish_total(SRReport& r) {
    const auto s = r.suppress.status, e = r.enhance.status;
    if (s == RatioStatus::undefined || e == RatioStatus::undefined) {
        r.total_status = RatioStatus::undefined;
        r.sr_total = 0.0;
    } else if (s == RatioStatus::infinite || e == RatioStatus::infinite) {
        r.total_status = RatioStatus::infinite;
        r.sr_total = std::numeric_limits<double>::infinity();
    } else {
        r.total_status = RatioStatus::finite;
        r.sr_total = r.suppress.sr + r.enhance.sr;
    }
}

/// Orders reports for "A beats B" comparisons: infinite > finite > undefined.
inline bool sr_greater(const SRReport& a, const SRReport& b) {
    auto rank = [](RatioStatus s) { return s == RatioStatus::infinite ? 2 : s == RatioStatus::finite ? 1 : 0; };
    if (rank(a.total_status) != rank(b.total_status)) return rank(a.total_status) > rank(b.total_status);
    return a.total_status == RatioStatus::finite && a.sr_total > b.sr_total;
}

// ---------------------------------------------------------------------------
// Editing

/// One partner per query: a seeded draw among queries with the same
/// language and architecture but a different relation.
inline std::map<std::string, std::string> pair_irrelevant(const std::vector<ClozeQuery>& queries, std::uint64_t seed) {
    std::map<std::string, std::string> out;
    std::vector<const ClozeQuery*> sorted;
    for (const auto& q : queries) sorted.push_back(&q);
    std::sort(sorted.begin(), sorted.end(), [](auto* a, auto* b) { return a->id < b->id; });
    for (const auto* q : sorted) {
        std::vector<const ClozeQuery*> pool;
        for (const auto* o : sorted)
            if (o->lang_id == q->lang_id && o->architecture == q->architecture && o->relation != q->relation)
                pool.push_back(o);
        if (pool.empty()) throw PreconditionError("no query of a different relation to pair with '" + q->id + "'");
        Rng rng(derive_seed(seed, q->id));
        out[q->id] = pool[rng.index(pool.size())]->id;
    }
    return out;
}

inline Intervention edit_for(EditKind mode, const std::set<NeuronId>& neurons, double enhance_factor) {
    return mode == EditKind::suppress ? Intervention::suppress(neurons) : Intervention::enhance(neurons, enhance_factor);
}

struct EditOptions {
    ExclusionRule exclusion;
    double enhance_factor = 2.0;
};

/// A single edit measured on a relevant query and its irrelevant partner.
struct EditTrial {
    const ClozeQuery* relevant = nullptr;
    const ClozeQuery* irrelevant = nullptr;
    std::set<NeuronId> neurons;
};

inline SRReport run_edit_trials(const Model& m, const std::vector<EditTrial>& trials, const EditOptions& opt) {
    SRReport rep;
    rep.exclusion_rule = opt.exclusion.describe();
    std::map<std::string, double> before;
    auto base = [&](const ClozeQuery& q) {
        auto it = before.find(q.id);
        if (it != before.end()) return it->second;
        return before[q.id] = gold_probability(m, q);
    };
    for (EditKind mode : {EditKind::suppress, EditKind::enhance}) {
        std::vector<QueryDeltas> rows;
        for (std::size_t t = 0; t < trials.size(); ++t) {
            const auto& tr = trials[t];
            QueryDeltas d;
            d.query_id = tr.relevant->id + "#" + std::to_string(t);
            d.mastered = is_mastered(m, *tr.relevant);
            for (auto kind : {TargetKind::relevant, TargetKind::irrelevant}) {
                const auto& q = kind == TargetKind::relevant ? *tr.relevant : *tr.irrelevant;
                EditOutcome o{tr.relevant->id, mode, kind, base(q), base(q), 0.0};
                if (!tr.neurons.empty()) {
                    const auto iv = edit_for(mode, tr.neurons, opt.enhance_factor);
                    o.prob_after = gold_probability(m, q, &iv);
                    o.delta = std::abs(o.prob_after - o.prob_before);
                }
                (kind == TargetKind::relevant ? d.relevant : d.irrelevant) = o.delta;
                rep.outcomes.push_back(o);
            }
            rows.push_back(d);
        }
        (mode == EditKind::suppress ? rep.suppress : rep.enhance) = mode_success_rate(std::move(rows), opt.exclusion);
    }
    finish_total(rep);
    return rep;
}

/// SR of editing each query's own neurons. Queries missing from
/// `neuron_sets` are skipped and counted.
inline SRReport editing_success_rate(const Model& m, const std::vector<ClozeQuery>& queries,
                                     const std::map<std::string, std::set<NeuronId>>& neuron_sets,
                                     const std::map<std::string, std::string>& partners, const EditOptions& opt = {}) {
    std::map<std::string, const ClozeQuery*> by_id;
    for (const auto& q : queries) by_id[q.id] = &q;
    std::vector<EditTrial> trials;
    int skipped = 0;
    for (const auto& [id, q] : by_id) {
        auto ns = neuron_sets.find(id);
        if (ns == neuron_sets.end()) {
            ++skipped;
            continue;
        }
        auto p = partners.find(id);
        if (p == partners.end() || !by_id.count(p->second))
            throw PreconditionError("no irrelevant partner for query '" + id + "'");
        const auto* partner = by_id.at(p->second);
        if (partner->relation == q->relation)
            throw PreconditionError("partner of '" + id + "' shares its relation");
        trials.push_back({q, partner, ns->second});
    }
    auto rep = run_edit_trials(m, trials, opt);
    rep.n_skipped = skipped;
    return rep;
}

/// Size-matched control: each set replaced by the same number of units drawn
/// uniformly without replacement from the whole model.
inline std::map<std::string, std::set<NeuronId>> random_neuron_sets(
    const std::map<std::string, std::set<NeuronId>>& sets, const ModelConfig& cfg, std::uint64_t seed) {
    std::map<std::string, std::set<NeuronId>> out;
    const std::size_t total = static_cast<std::size_t>(cfg.n_layers) * static_cast<std::size_t>(cfg.ffn_dim);
    for (const auto& [id, s] : sets) {
        Rng rng(derive_seed(seed, id));
        std::set<NeuronId> pick;
        while (pick.size() < std::min(s.size(), total)) {
            const auto flat = rng.index(total);
            pick.insert({static_cast<int>(flat / static_cast<std::size_t>(cfg.ffn_dim)),
                         static_cast<int>(flat % static_cast<std::size_t>(cfg.ffn_dim))});
        }
        out[id] = std::move(pick);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Cross-lingual editing

enum class XlingProtocol { likn, mono_kn, seq_kn };

inline std::string_view to_string(XlingProtocol p) {
    switch (p) {
    case XlingProtocol::likn: return "LIKN";
    case XlingProtocol::mono_kn: return "Mono-KN";
    case XlingProtocol::seq_kn: return "Seq-KN";
    }
    return "?";
}

struct XlingReport {
    XlingProtocol protocol = XlingProtocol::likn;
    std::map<std::string, SRReport> per_language; // keyed by evaluation language
    SRReport pooled;                              // all evaluation languages together
    int n_facts = 0;
    int n_skipped = 0;
};

/// Inputs shared by the three protocols. Queries are one architecture's,
/// in exactly two languages; `kn` is keyed by query id, `likn` by fact id.
struct XlingInputs {
    std::vector<ClozeQuery> queries;
    std::map<std::string, std::set<NeuronId>> kn;
    std::map<std::string, LiknSet> likn;
    std::map<std::string, std::string> partners;
};

/// LIKN edits the shared set and measures every language; Mono-KN edits one
/// language's set and measures the other; Seq-KN edits both languages' sets
/// and measures every language. Facts whose shared set is missing or empty
/// are skipped (and counted) so all protocols see the same facts.
inline XlingReport cross_lingual_edit_experiment(const Model& m, const XlingInputs& in, XlingProtocol protocol,
                                                 const EditOptions& opt = {}) {
    std::map<std::string, std::map<std::string, const ClozeQuery*>> by_fact; // fact -> lang -> query
    std::map<std::string, const ClozeQuery*> by_id;
    std::set<std::string> langs;
    for (const auto& q : in.queries) {
        by_fact[q.fact_id][q.lang_id] = &q;
        by_id[q.id] = &q;
        langs.insert(q.lang_id);
    }
    if (langs.size() != 2) throw PreconditionError("cross-lingual editing needs exactly two languages");
    const std::string A = *langs.begin(), B = *langs.rbegin();

    XlingReport rep;
    rep.protocol = protocol;
    std::map<std::string, std::vector<EditTrial>> trials; // by evaluation language
    auto kn_of = [&](const ClozeQuery* q) {
        auto it = in.kn.find(q->id);
        if (it == in.kn.end()) throw PreconditionError("no knowledge-neuron set for '" + q->id + "'");
        return it->second;
    };
    auto partner_of = [&](const ClozeQuery* q) {
        auto it = in.partners.find(q->id);
        if (it == in.partners.end() || !by_id.count(it->second))
            throw PreconditionError("no irrelevant partner for query '" + q->id + "'");
        return by_id.at(it->second);
    };
    for (const auto& [fact, per_lang] : by_fact) {
        if (per_lang.size() != 2) throw PreconditionError("fact '" + fact + "' is not rendered in both languages");
        auto lk = in.likn.find(fact);
        if (lk == in.likn.end() || lk->second.neurons.empty()) {
            ++rep.n_skipped;
            continue;
        }
        ++rep.n_facts;
        const auto* qa = per_lang.at(A);
        const auto* qb = per_lang.at(B);
        switch (protocol) {
        case XlingProtocol::likn:
            trials[A].push_back({qa, partner_of(qa), lk->second.neurons});
            trials[B].push_back({qb, partner_of(qb), lk->second.neurons});
            break;
        case XlingProtocol::mono_kn:
            trials[B].push_back({qb, partner_of(qb), kn_of(qa)});
            trials[A].push_back({qa, partner_of(qa), kn_of(qb)});
            break;
        case XlingProtocol::seq_kn: {
            auto both = kn_of(qa);
            const auto nb = kn_of(qb);
            both.insert(nb.begin(), nb.end());
            trials[A].push_back({qa, partner_of(qa), both});
            trials[B].push_back({qb, partner_of(qb), both});
            break;
        }
        }
    }
    std::vector<EditTrial> all;
    for (const auto& lang : {A, B}) {
        rep.per_language[lang] = run_edit_trials(m, trials[lang], opt);
        all.insert(all.end(), trials[lang].begin(), trials[lang].end());
    }
    rep.pooled = run_edit_trials(m, all, opt);
    rep.pooled.n_skipped = rep.n_skipped;
    return rep;
}

// ---------------------------------------------------------------------------
// Fact checking

/// Banks are per language and relation: languages share no tokens, so
/// their statements need not share storage.
inline std::string bank_key(const ClozeQuery& q) { return q.lang_id + "/" + q.relation; }

struct DknBank {
    std::string key; // see bank_key
    std::set<NeuronId> neurons;
    double lambda = 0.0;
    int n_mining_queries = 0;
};

inline double mean_bank_activation(const ActivationSnapshot& snap, const std::set<NeuronId>& bank) {
    double s = 0.0;
    for (auto id : bank) s += snap.values(id.layer, id.unit);
    return s / static_cast<double>(bank.size());
}

/// Median of the mean bank activation over the mining queries' correct
/// statements (gold filled in). Zero for an empty bank.
inline double calibrate_lambda(const Model& m, const std::set<NeuronId>& bank, const std::vector<ClozeQuery>& mining) {
    if (bank.empty() || mining.empty()) return 0.0;
    std::vector<double> v;
    for (const auto& q : mining) v.push_back(mean_bank_activation(record_statement_activations(m, q, q.gold_token), bank));
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

/// Bank and threshold for one language/relation from its mining-split DKN sets.
inline DknBank build_dkn_bank(const Model& m, const std::string& key, const std::vector<DknSet>& mining_sets,
                              const std::vector<ClozeQuery>& mining_queries, double t_percent) {
    DknBank b;
    b.key = key;
    b.neurons = aggregate_dkn_bank(mining_sets, t_percent);
    b.lambda = calibrate_lambda(m, b.neurons, mining_queries);
    b.n_mining_queries = static_cast<int>(mining_sets.size());
    return b;
}

/// True ("correct") when the mean bank activation on the filled statement
/// exceeds lambda. An empty bank always says incorrect.
inline bool fact_check(const Model& m, const std::set<NeuronId>& bank, const ClozeQuery& q, int candidate,
                       double lambda) {
    if (bank.empty()) return false;
    return mean_bank_activation(record_statement_activations(m, q, candidate), bank) > lambda;
}

/// Plain-model check: the candidate is correct iff it is the top-1 answer.
inline bool fact_check_baseline(const Model& m, const ClozeQuery& q, int candidate) {
    return argmax(predict(m, q)) == candidate;
}

struct PRF1 {
    double precision = 0.0, recall = 0.0, f1 = 0.0;
    int tp = 0, fp = 0, fn = 0, tn = 0;
    bool precision_undefined = false;
    bool recall_undefined = false;
};

inline PRF1 prf1(const std::vector<bool>& predicted, const std::vector<bool>& gold) {
    if (predicted.size() != gold.size())
        throw PreconditionError("prf1: " + std::to_string(predicted.size()) + " predictions vs " +
                                std::to_string(gold.size()) + " labels");
    PRF1 r;
    for (std::size_t i = 0; i < gold.size(); ++i) {
        if (predicted[i] && gold[i]) ++r.tp;
        else if (predicted[i]) ++r.fp;
        else if (gold[i]) ++r.fn;
        else ++r.tn;
    }
    r.precision_undefined = r.tp + r.fp == 0;
    r.recall_undefined = r.tp + r.fn == 0;
    r.precision = r.precision_undefined ? 0.0 : static_cast<double>(r.tp) / (r.tp + r.fp);
    r.recall = r.recall_undefined ? 0.0 : static_cast<double>(r.tp) / (r.tp + r.fn);
    r.f1 = r.precision + r.recall > 0.0 ? 2.0 * r.precision * r.recall / (r.precision + r.recall) : 0.0;
    return r;
}

struct FactCheckItem {
    std::string query_id;
    std::string relation;
    int candidate = 0;
    bool gold = false;
    bool with_dkn = false;
    bool baseline = false;
};

struct FactCheckReport {
    PRF1 with_dkn;
    PRF1 wo_dkn;
    double t_percent = 0.0;
    std::map<std::string, DknBank> banks;
    std::map<std::string, std::pair<PRF1, PRF1>> per_relation; // (with, without)
    std::vector<FactCheckItem> items;
};

/// Every checking query contributes its correct statement and its wrong-fact
/// statement. Banks are keyed by bank_key.
inline FactCheckReport run_fact_check(const Model& m, const std::vector<ClozeQuery>& checking,
                                      const std::map<std::string, WrongFact>& wrong_by_query,
                                      const std::map<std::string, DknBank>& banks, double t_percent) {
    FactCheckReport rep;
    rep.t_percent = t_percent;
    rep.banks = banks;
    std::map<std::string, std::vector<const FactCheckItem*>> by_rel;
    for (const auto& q : checking) {
        auto w = wrong_by_query.find(q.id);
        if (w == wrong_by_query.end()) throw PreconditionError("no wrong fact for query '" + q.id + "'");
        auto b = banks.find(bank_key(q));
        if (b == banks.end()) throw PreconditionError("no DKN bank for '" + bank_key(q) + "'");
        for (auto [cand, label] : {std::pair{q.gold_token, true}, std::pair{w->second.wrong_token, false}}) {
            FactCheckItem it{q.id, q.relation, cand, label, fact_check(m, b->second.neurons, q, cand, b->second.lambda),
                             fact_check_baseline(m, q, cand)};
            rep.items.push_back(it);
        }
    }
    auto score = [](const std::vector<FactCheckItem>& items, const std::string* rel) {
        std::vector<bool> with, without, gold;
        for (const auto& it : items) {
            if (rel && it.relation != *rel) continue;
            with.push_back(it.with_dkn);
            without.push_back(it.baseline);
            gold.push_back(it.gold);
        }
        return std::pair{prf1(with, gold), prf1(without, gold)};
    };
    std::tie(rep.with_dkn, rep.wo_dkn) = score(rep.items, nullptr);
    std::set<std::string> rels;
    for (const auto& it : rep.items) rels.insert(it.relation);
    for (const auto& r : rels) rep.per_relation[r] = score(rep.items, &r);
    return rep;
}

// ---------------------------------------------------------------------------
// Records

inline nlohmann::json to_json(const ModeSR& r) {
    nlohmann::json j{{"status", to_string(r.status)},
                     {"mean_relevant", r.mean_relevant},
                     {"mean_irrelevant", r.mean_irrelevant},
                     {"n_included", r.n_included},
                     {"n_excluded", r.n_excluded}};
    j["sr"] = r.status == RatioStatus::finite ? nlohmann::json(r.sr) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json to_json(const SRReport& r) {
    nlohmann::json j{{"suppress", to_json(r.suppress)},
                     {"enhance", to_json(r.enhance)},
                     {"total_status", to_string(r.total_status)},
                     {"exclusion_rule", r.exclusion_rule},
                     {"n_skipped", r.n_skipped}};
    j["sr_total"] = r.total_status == RatioStatus::finite ? nlohmann::json(r.sr_total) : nlohmann::json(nullptr);
    return j;
}

inline nlohmann::json to_json(const XlingReport& r) {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [lang, rep] : r.per_language) per[lang] = to_json(rep);
    return {{"protocol", to_string(r.protocol)},
            {"n_facts", r.n_facts},
            {"n_skipped", r.n_skipped},
            {"per_language", per},
            {"pooled", to_json(r.pooled)}};
}

inline nlohmann::json to_json(const PRF1& r) {
    return {{"precision", r.precision}, {"recall", r.recall}, {"f1", r.f1},
            {"tp", r.tp},               {"fp", r.fp},         {"fn", r.fn},
            {"tn", r.tn},               {"precision_undefined", r.precision_undefined},
            {"recall_undefined", r.recall_undefined}};
}

inline nlohmann::json to_json(const DknBank& b) {
    return {{"key", b.key},
            {"neurons", neurons_to_json(b.neurons)},
            {"lambda", b.lambda},
            {"n_mining_queries", b.n_mining_queries}};
}

inline DknBank dkn_bank_from_json(const nlohmann::json& j) {
    DknBank b;
    b.key = j.at("key").get<std::string>();
    b.neurons = neurons_from_json(j.at("neurons"));
    b.lambda = j.at("lambda").get<double>();
    b.n_mining_queries = j.at("n_mining_queries").get<int>();
    return b;
}

inline nlohmann::json to_json(const FactCheckReport& r) {
    nlohmann::json per = nlohmann::json::object();
    for (const auto& [rel, pr] : r.per_relation) per[rel] = {{"with_dkn", to_json(pr.first)}, {"wo_dkn", to_json(pr.second)}};
    nlohmann::json banks = nlohmann::json::object();
    for (const auto& [rel, b] : r.banks) banks[rel] = to_json(b);
    return {{"with_dkn", to_json(r.with_dkn)},
            {"wo_dkn", to_json(r.wo_dkn)},
            {"wo_dkn_rule", "top-1 prediction at the blank equals the candidate"},
            {"t_percent", r.t_percent},
            {"banks", banks},
            {"per_relation", per},
            {"n_statements", r.items.size()}};
}

} // namespace knlab
