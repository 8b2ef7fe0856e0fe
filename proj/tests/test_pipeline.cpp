#include <gtest/gtest.h>

#include <knlab/pipeline.hpp>

using namespace knlab;

namespace {

RunConfig small_config(const std::string& name) {
    auto c = default_run_config(2);
    c.corpus.facts_per_relation = 4;
    c.model.layers = 2;
    c.model.dim = 32;
    c.model.heads = 2;
    c.model.ffn_dim = 64;
    c.model.max_seq_len = 8;
    c.model.dropout = 0.05;
    c.model.train.epochs = 150;
    c.attribution.steps = 3;
    c.output_dir = (fs::path(::testing::TempDir()) / ("knlab_pipeline_" + name)).string();
    fs::remove_all(c.output_dir);
    return c;
}

} // namespace

TEST(RunConfig, JsonRoundTrip) {
    auto c = default_run_config(2);
    c.evaluation.lambda = 0.25;
    c.attribution.baseline_mode = BaselineMode::zero;
    const auto back = run_config_from_json(to_json(c));
    EXPECT_EQ(to_json(back), to_json(c));
    EXPECT_EQ(back.hash(), c.hash());
}

TEST(RunConfig, HashIgnoresOutputDirOnly) {
    auto a = default_run_config(2), b = a;
    b.output_dir = "elsewhere";
    EXPECT_EQ(a.hash(), b.hash());
    b.seed += 1;
    EXPECT_NE(a.hash(), b.hash());
}

TEST(RunConfig, ValidationErrors) {
    auto c = default_run_config(2);
    c.attribution.tau.erase("L2");
    try {
        c.validate();
        FAIL();
    } catch (const ConfigError& e) {
        EXPECT_NE(std::string(e.what()).find("L2"), std::string::npos);
    }
    auto j = to_json(default_run_config(2));
    j["model"]["layerz"] = 3;
    EXPECT_THROW(run_config_from_json(j), ConfigError);
    j = to_json(default_run_config(2));
    j.erase("schema_version");
    EXPECT_THROW(run_config_from_json(j), ConfigError);
    j = to_json(default_run_config(2));
    j["schema_version"] = 99;
    EXPECT_THROW(run_config_from_json(j).validate(), ConfigError);
    auto d = default_run_config(2);
    d.dkn.t_low = 0.5;
    EXPECT_THROW(d.validate(), ConfigError);
}

TEST(Pipeline, MissingTauFailsBeforeAnyStage) {
    auto c = small_config("missing_tau");
    c.attribution.tau.erase("L1");
    EXPECT_THROW(run_pipeline(c), ConfigError);
    EXPECT_FALSE(fs::exists(c.output_dir));
}

TEST(Pipeline, FullRunThenResumeReusesEverything) {
    const auto c = small_config("full");
    const auto first = run_pipeline(c);
    EXPECT_EQ(first.stages_run.size(), stage_names().size());
    for (const auto& s : stage_names()) EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / s / "manifest.json")) << s;
    for (const char* f : {"09_report/report.json", "09_report/report.md", "09_report/hist_ae_likn.svg",
                          "09_report/hist_ar_dkn.csv", "06_edit_eval/sr_ae.json", "07_xling_eval/xling_ar.json",
                          "08_fact_check/fact_check_ae.json", "04_likn/likn_ar.jsonl"})
        EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / f)) << f;

    const auto second = run_pipeline(c);
    EXPECT_TRUE(second.stages_run.empty());
    EXPECT_EQ(second.stages_reused.size(), stage_names().size());
    EXPECT_EQ(second.report_checksum, first.report_checksum);

    // A damaged artifact reruns its stage; downstream stages see identical
    // inputs again and are reused.
    std::ofstream(fs::path(c.output_dir) / "05_dkn" / "dkn_ae.jsonl", std::ios::app) << "\n";
    const auto third = run_pipeline(c);
    EXPECT_EQ(third.stages_run, (std::vector<std::string>{"05_dkn"}));
    EXPECT_EQ(third.report_checksum, first.report_checksum);

    const auto rep = read_json((fs::path(c.output_dir) / "09_report" / "report.json").string());
    for (const char* arch : {"ae", "ar"}) {
        const auto& a = rep.at("architectures").at(arch);
        for (const char* k : {"with_dkn", "wo_dkn"}) {
            const auto& r = a.at("fact_check").at(k);
            for (const char* m : {"precision", "recall", "f1"}) {
                EXPECT_GE(r.at(m).get<double>(), 0.0);
                EXPECT_LE(r.at(m).get<double>(), 1.0);
            }
        }
        for (const auto& h : a.at("histograms")) {
            double sum = 0.0;
            for (const auto& p : h.at("percent")) sum += p.get<double>();
            if (sum > 0.0) {
                EXPECT_NEAR(sum, 100.0, 0.01);
            }
        }
    }
}

TEST(Pipeline, StageFailureNamesTheStageAndKeepsEarlierOutputs) {
    auto c = small_config("fail");
    c.model.train.epochs = 0;
    try {
        run_pipeline(c);
        FAIL();
    } catch (const Error& e) {
        EXPECT_NE(std::string(e.what()).find("02_train"), std::string::npos);
    }
    EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "01_corpus" / "manifest.json"));
    EXPECT_FALSE(fs::exists(fs::path(c.output_dir) / "02_train" / "manifest.json"));
}

TEST(Pipeline, MonolingualRunSkipsCrossLingualStages) {
    auto c = small_config("mono");
    c.corpus.languages = 1;
    c.attribution.tau = {{"L1", 0.2}};
    c.model.architectures = {Architecture::auto_regressive};
    const auto r = run_pipeline(c);
    EXPECT_EQ(r.stages_run.size(), stage_names().size());
    const auto notes = read_json((fs::path(c.output_dir) / "04_likn" / "manifest.json").string()).at("notes");
    EXPECT_TRUE(notes.contains("skipped"));
    EXPECT_TRUE(fs::exists(fs::path(c.output_dir) / "05_dkn" / "dkn_ar.jsonl"));
}

TEST(ParallelFor, WorkerCountDoesNotChangeResults) {
    std::vector<double> a(50), b(50);
    parallel_for(50, 1, [&](std::size_t i) { a[i] = std::sqrt(static_cast<double>(i)); });
    parallel_for(50, 4, [&](std::size_t i) { b[i] = std::sqrt(static_cast<double>(i)); });
    EXPECT_EQ(a, b);
    EXPECT_THROW(parallel_for(10, 3, [](std::size_t i) {
                     if (i == 7) throw PreconditionError("boom");
                 }),
                 PreconditionError);
}
