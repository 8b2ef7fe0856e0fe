#include <gtest/gtest.h>

#include <knlab/evaluation.hpp>

#include "support.hpp"

using namespace knlab;
using knlab::testing::tiny_corpus;
using knlab::testing::tiny_trained;

namespace {

std::vector<QueryDeltas> rows(const std::vector<std::pair<double, double>>& v) {
    std::vector<QueryDeltas> out;
    for (std::size_t i = 0; i < v.size(); ++i) out.push_back({"q" + std::to_string(i), true, v[i].first, v[i].second});
    return out;
}

ExclusionRule no_exclusion() { return {false, 0.0}; }

} // namespace

TEST(SuccessRate, WorkedExample) {
    SRReport r;
    r.suppress = mode_success_rate(rows({{0.3, 0.1}, {0.3, 0.1}}), no_exclusion());
    r.enhance = mode_success_rate(rows({{0.1, 0.1}, {0.3, 0.1}}), no_exclusion());
    finish_total(r);
    EXPECT_NEAR(r.suppress.sr, 3.0, 1e-12);
    EXPECT_NEAR(r.enhance.sr, 2.0, 1e-12);
    EXPECT_NEAR(r.sr_total, 5.0, 1e-12);
    EXPECT_EQ(r.total_status, RatioStatus::finite);
}

TEST(SuccessRate, ZeroChangeIsUndefinedAndZeroIrrelevantIsInfinite) {
    auto u = mode_success_rate(rows({{0.0, 0.0}, {0.0, 0.0}}), no_exclusion());
    EXPECT_EQ(u.status, RatioStatus::undefined);
    auto inf = mode_success_rate(rows({{0.2, 0.0}}), no_exclusion());
    EXPECT_EQ(inf.status, RatioStatus::infinite);
    EXPECT_TRUE(std::isinf(inf.sr));
    EXPECT_EQ(mode_success_rate({}, ExclusionRule{}).status, RatioStatus::undefined);
}

TEST(SuccessRate, SwappingRolesInvertsTheRatio) {
    Rng rng(8);
    for (int t = 0; t < 20; ++t) {
        std::vector<std::pair<double, double>> v, sw;
        for (int i = 0; i < 7; ++i) {
            const double x = 0.01 + rng.uniform(), y = 0.01 + rng.uniform();
            v.push_back({x, y});
            sw.push_back({y, x});
        }
        const auto a = mode_success_rate(rows(v), no_exclusion());
        const auto b = mode_success_rate(rows(sw), no_exclusion());
        EXPECT_NEAR(a.sr * b.sr, 1.0, 1e-12);
    }
}

TEST(SuccessRate, ExclusionDropsUnmasteredAndTopFivePercent) {
    // 40 queries: floor(0.05 * 40) = 2 highest relevant and 2 highest
    // irrelevant deltas are dropped.
    std::vector<QueryDeltas> r;
    for (int i = 0; i < 40; ++i) r.push_back({"q" + std::to_string(100 + i), true, 0.1, 0.05});
    r[3].relevant = 0.9;
    r[4].relevant = 0.8;
    r[5].irrelevant = 0.7;
    r[6].irrelevant = 0.6;
    r.push_back({"bad", false, 5.0, 0.0});
    const auto s = mode_success_rate(r, ExclusionRule{});
    EXPECT_EQ(s.n_included, 36);
    EXPECT_EQ(s.n_excluded, 5);
    EXPECT_NEAR(s.sr, 2.0, 1e-12);
}

TEST(SuccessRate, OrderingForComparisons) {
    SRReport fin, inf, und;
    fin.total_status = RatioStatus::finite;
    fin.sr_total = 3.0;
    inf.total_status = RatioStatus::infinite;
    EXPECT_TRUE(sr_greater(inf, fin));
    EXPECT_TRUE(sr_greater(fin, und));
    EXPECT_FALSE(sr_greater(und, und));
    SRReport fin2 = fin;
    fin2.sr_total = 2.0;
    EXPECT_TRUE(sr_greater(fin, fin2));
    EXPECT_FALSE(sr_greater(fin2, fin));
}

TEST(PairIrrelevant, DifferentRelationSameLanguageDeterministic) {
    const auto c = tiny_corpus();
    const auto qs = c.queries_for(Architecture::auto_encoding);
    const auto p = pair_irrelevant(qs, 3);
    EXPECT_EQ(p, pair_irrelevant(qs, 3));
    std::map<std::string, const ClozeQuery*> by_id;
    for (const auto& q : qs) by_id[q.id] = &q;
    ASSERT_EQ(p.size(), qs.size());
    for (const auto& [id, partner] : p) {
        EXPECT_NE(by_id.at(id)->relation, by_id.at(partner)->relation);
        EXPECT_EQ(by_id.at(id)->lang_id, by_id.at(partner)->lang_id);
    }
}

TEST(EditingSuccessRate, EmptyNeuronSetsGiveUndefined) {
    const auto c = tiny_corpus();
    const auto& m = tiny_trained(Architecture::auto_encoding);
    const auto qs = c.queries_for(Architecture::auto_encoding);
    std::map<std::string, std::set<NeuronId>> sets;
    for (const auto& q : qs) sets[q.id] = {};
    const auto r = editing_success_rate(m, qs, sets, pair_irrelevant(qs, 1));
    EXPECT_EQ(r.total_status, RatioStatus::undefined);
    for (const auto& o : r.outcomes) EXPECT_EQ(o.delta, 0.0);
}

TEST(EditingSuccessRate, OutcomesAreConsistentAndEditsAreReversible) {
    const auto c = tiny_corpus();
    const auto& m = tiny_trained(Architecture::auto_regressive);
    const auto qs = c.queries_for(Architecture::auto_regressive);
    std::map<std::string, double> before;
    for (const auto& q : qs) before[q.id] = gold_probability(m, q);
    std::map<std::string, std::set<NeuronId>> sets;
    for (const auto& q : qs) sets[q.id] = {{1, 0}, {1, 1}, {0, 7}};
    const auto r = editing_success_rate(m, qs, sets, pair_irrelevant(qs, 1));
    EXPECT_EQ(r.outcomes.size(), qs.size() * 4);
    for (const auto& o : r.outcomes) {
        EXPECT_GE(o.prob_after, 0.0);
        EXPECT_LE(o.prob_after, 1.0);
        EXPECT_DOUBLE_EQ(o.delta, std::abs(o.prob_after - o.prob_before));
    }
    for (const auto& q : qs) EXPECT_EQ(gold_probability(m, q), before[q.id]);
}

TEST(EditingSuccessRate, PartnerOfSameRelationIsRejected) {
    const auto c = tiny_corpus();
    const auto& m = tiny_trained(Architecture::auto_regressive);
    const auto qs = c.queries_for(Architecture::auto_regressive);
    std::map<std::string, std::set<NeuronId>> sets{{qs[0].id, {{0, 0}}}};
    std::map<std::string, std::string> partners{{qs[0].id, qs[0].id}};
    EXPECT_THROW(editing_success_rate(m, qs, sets, partners), PreconditionError);
}

TEST(RandomNeuronSets, SizeMatchedAndSeeded) {
    ModelConfig cfg;
    cfg.n_layers = 3;
    cfg.ffn_dim = 5;
    std::map<std::string, std::set<NeuronId>> sets{{"a", {{0, 0}, {1, 1}, {2, 2}}}, {"b", {}}};
    const auto r = random_neuron_sets(sets, cfg, 7);
    EXPECT_EQ(r.at("a").size(), 3u);
    EXPECT_TRUE(r.at("b").empty());
    EXPECT_EQ(r, random_neuron_sets(sets, cfg, 7));
}

namespace {

XlingInputs shared_storage_inputs(const Corpus& c, Architecture arch, bool empty_likn) {
    XlingInputs in;
    in.queries = c.queries_for(arch);
    for (const auto& q : in.queries) in.kn[q.id] = {{1, 2}, {1, 3}};
    for (const auto& f : c.facts) {
        LiknSet l;
        l.fact_id = f.id;
        if (!empty_likn) l.neurons = {{1, 2}, {1, 3}};
        in.likn[f.id] = l;
    }
    in.partners = pair_irrelevant(in.queries, 2);
    return in;
}

} // namespace

TEST(CrossLingual, SharedStorageMakesLiknAndSeqIdentical) {
    const auto c = tiny_corpus();
    const auto& m = tiny_trained(Architecture::auto_encoding);
    const auto in = shared_storage_inputs(c, Architecture::auto_encoding, false);
    const auto l = cross_lingual_edit_experiment(m, in, XlingProtocol::likn);
    const auto s = cross_lingual_edit_experiment(m, in, XlingProtocol::seq_kn);
    EXPECT_EQ(l.pooled.sr_total, s.pooled.sr_total);
    EXPECT_EQ(l.pooled.total_status, s.pooled.total_status);
    EXPECT_EQ(l.n_facts, 8);
    EXPECT_EQ(l.per_language.size(), 2u);
}

TEST(CrossLingual, EmptySharedSetsSkipEverything) {
    const auto c = tiny_corpus();
    const auto& m = tiny_trained(Architecture::auto_encoding);
    const auto r = cross_lingual_edit_experiment(m, shared_storage_inputs(c, Architecture::auto_encoding, true),
                                                 XlingProtocol::likn);
    EXPECT_EQ(r.n_skipped, 8);
    EXPECT_EQ(r.n_facts, 0);
    EXPECT_EQ(r.pooled.total_status, RatioStatus::undefined);
}

TEST(CrossLingual, RequiresTwoLanguages) {
    const auto c = tiny_corpus(1);
    const auto& m = tiny_trained(Architecture::auto_encoding);
    XlingInputs in;
    in.queries = c.queries_for(Architecture::auto_encoding);
    EXPECT_THROW(cross_lingual_edit_experiment(m, in, XlingProtocol::likn), PreconditionError);
}

TEST(Prf1, Examples) {
    // TP=2, FP=1, FN=1.
    const auto r = prf1({true, true, true, false, false}, {true, true, false, true, false});
    EXPECT_NEAR(r.precision, 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(r.recall, 2.0 / 3.0, 1e-12);
    EXPECT_NEAR(r.f1, 2.0 / 3.0, 1e-12);
    const auto all = prf1({true, true, true, true}, {true, false, true, false});
    EXPECT_DOUBLE_EQ(all.recall, 1.0);
    EXPECT_DOUBLE_EQ(all.precision, 0.5);
    EXPECT_NEAR(all.f1, 2.0 / 3.0, 1e-12);
    const auto none = prf1({false, false}, {true, false});
    EXPECT_EQ(none.precision, 0.0);
    EXPECT_TRUE(none.precision_undefined);
    EXPECT_EQ(none.recall, 0.0);
    EXPECT_EQ(none.f1, 0.0);
    EXPECT_THROW(prf1({true}, {true, false}), PreconditionError);
}

TEST(Prf1, BoundsOnRandomLabels) {
    Rng rng(12);
    for (int t = 0; t < 200; ++t) {
        std::vector<bool> p, g;
        for (int i = 0; i < 10; ++i) {
            p.push_back(rng.uniform() < 0.5);
            g.push_back(rng.uniform() < 0.5);
        }
        const auto r = prf1(p, g);
        for (double v : {r.precision, r.recall, r.f1}) {
            EXPECT_GE(v, 0.0);
            EXPECT_LE(v, 1.0);
        }
        EXPECT_LE(r.f1, std::max(r.precision, r.recall) + 1e-15);
    }
}

TEST(FactCheck, MeanActivationRule) {
    ActivationSnapshot snap;
    snap.values = Mat::Zero(2, 3);
    snap.values(0, 1) = 0.8;
    snap.values(1, 2) = 0.6;
    EXPECT_NEAR(mean_bank_activation(snap, {{0, 1}, {1, 2}}), 0.7, 1e-12);
    EXPECT_GT(mean_bank_activation(snap, {{0, 1}, {1, 2}}), 0.5);
}

TEST(FactCheck, EmptyBankSaysIncorrectAndModelPathIsDeterministic) {
    const auto c = tiny_corpus();
    const auto& m = tiny_trained(Architecture::auto_encoding);
    const auto q = c.queries_for(Architecture::auto_encoding).front();
    EXPECT_FALSE(fact_check(m, {}, q, q.gold_token, -1e9));
    const std::set<NeuronId> bank{{0, 3}, {1, 4}};
    const auto acts = record_statement_activations(m, q, q.gold_token);
    const double mean = mean_bank_activation(acts, bank);
    EXPECT_TRUE(fact_check(m, bank, q, q.gold_token, mean - 1e-9));
    EXPECT_FALSE(fact_check(m, bank, q, q.gold_token, mean));
    EXPECT_EQ(fact_check(m, bank, q, q.gold_token, 0.1), fact_check(m, bank, q, q.gold_token, 0.1));
}

TEST(FactCheck, BaselineIsTopOne) {
    const auto c = tiny_corpus();
    const auto& m = tiny_trained(Architecture::auto_regressive);
    for (const auto& q : c.queries_for(Architecture::auto_regressive)) {
        const int top = argmax(predict(m, q));
        EXPECT_TRUE(fact_check_baseline(m, q, top));
        for (const auto& w : c.wrong_facts)
            if (query_id(w.fact_id, w.lang_id, Architecture::auto_regressive) == q.id && w.wrong_token != top)
                EXPECT_FALSE(fact_check_baseline(m, q, w.wrong_token));
    }
}

TEST(FactCheck, LambdaIsTheMedianOverMiningStatements) {
    const auto c = tiny_corpus();
    const auto& m = tiny_trained(Architecture::auto_encoding);
    auto qs = c.queries_for(Architecture::auto_encoding);
    qs.resize(5);
    const std::set<NeuronId> bank{{1, 1}};
    std::vector<double> v;
    for (const auto& q : qs) v.push_back(record_statement_activations(m, q, q.gold_token).values(1, 1));
    std::sort(v.begin(), v.end());
    EXPECT_DOUBLE_EQ(calibrate_lambda(m, bank, qs), v[2]);
    EXPECT_EQ(calibrate_lambda(m, {}, qs), 0.0);
}
