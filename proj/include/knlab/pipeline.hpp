#pragma once

// End-to-end run: corpus -> train -> locate -> likn -> dkn -> edit-eval ->
// xling-eval -> fact-check -> report. Each stage owns a subdirectory with a
// manifest (config hash, input and output checksums); a stage whose
// manifest still matches is reused instead of recomputed.

#include <atomic>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <sstream>
#include <thread>
#include <tuple>

#include "knlab/config.hpp"
#include "knlab/report.hpp"

namespace knlab {

namespace fs = std::filesystem;

using LogFn = std::function<void(const std::string&)>;

/// Runs fn(0..n-1) on up to `workers` threads. Results must be written to
/// per-index slots so the outcome does not depend on scheduling.
inline void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
    if (workers <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::mutex error_mu;
    auto body = [&] {
        for (std::size_t i = next++; i < n; i = next++) {
            try {
                fn(i);
            } catch (...) {
                std::lock_guard lock(error_mu);
                if (!error) error = std::current_exception();
            }
        }
    };
    std::vector<std::thread> pool;
    for (int w = 0; w < std::min<int>(workers, static_cast<int>(n)); ++w) pool.emplace_back(body);
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

// ---------------------------------------------------------------------------
// Artifacts shared between the pipeline and the CLI subcommands

inline std::string arch_tag(Architecture a) { return std::string(to_string(a)); }

inline std::vector<KnowledgeNeuronSet> read_kn_sets(const std::string& path) {
    std::vector<KnowledgeNeuronSet> out;
    for (const auto& j : read_lines(path)) out.push_back(kn_set_from_json(j));
    return out;
}

inline void write_kn_sets(const std::string& path, const std::vector<KnowledgeNeuronSet>& sets) {
    std::vector<nlohmann::json> recs;
    for (const auto& s : sets) recs.push_back(to_json(s));
    write_lines(path, recs);
}

inline std::map<std::string, std::set<NeuronId>> by_query(const std::vector<KnowledgeNeuronSet>& sets) {
    std::map<std::string, std::set<NeuronId>> out;
    for (const auto& s : sets) out[s.query_id] = s.neurons;
    return out;
}

struct LocateResult {
    std::vector<KnowledgeNeuronSet> sets;
    std::vector<nlohmann::json> attributions;
};

inline LocateResult locate_queries(const Model& m, const std::vector<ClozeQuery>& queries, const AttributionConfig& cfg,
                                   int workers, const LogFn& log = {}) {
    LocateResult r;
    r.sets.resize(queries.size());
    r.attributions.resize(queries.size());
    std::atomic<std::size_t> done{0};
    std::mutex log_mu;
    parallel_for(queries.size(), workers, [&](std::size_t i) {
        const auto& q = queries[i];
        const auto attr = attribute_query(m, q, cfg);
        auto s = select_knowledge_neurons(attr, q.lang_id, cfg);
        s.fact_id = q.fact_id;
        r.sets[i] = std::move(s);
        r.attributions[i] = to_json(attr);
        const auto k = ++done;
        if (log) {
            std::lock_guard lock(log_mu);
            log("  located " + q.id + " (" + std::to_string(k) + "/" + std::to_string(queries.size()) + ", |N|=" +
                std::to_string(r.sets[i].neurons.size()) + ")");
        }
    });
    return r;
}

/// Groups per-language sets by fact and intersects them.
inline std::vector<LiknSet> likn_from_sets(const std::vector<KnowledgeNeuronSet>& sets) {
    std::map<std::string, std::vector<KnowledgeNeuronSet>> by_fact;
    for (const auto& s : sets) by_fact[s.fact_id].push_back(s);
    std::vector<LiknSet> out;
    for (auto& [fact, group] : by_fact) {
        std::sort(group.begin(), group.end(), [](const auto& a, const auto& b) { return a.lang_id < b.lang_id; });
        out.push_back(intersect_languages(group));
    }
    return out;
}

inline std::vector<DknSet> dkn_for_queries(const Model& m, const std::vector<ClozeQuery>& queries,
                                           const std::map<std::string, std::set<NeuronId>>& kn, const DknConfig& cfg,
                                           int workers) {
    std::vector<DknSet> out(queries.size());
    parallel_for(queries.size(), workers, [&](std::size_t i) {
        const auto& q = queries[i];
        auto it = kn.find(q.id);
        if (it == kn.end()) throw PreconditionError("no knowledge-neuron set for query '" + q.id + "'");
        if (it->second.empty()) {
            out[i] = DknSet{q.id, q.fact_id, q.lang_id, q.relation, {}, {}, gold_probability(m, q)};
            return;
        }
        out[i] = detect_degenerate(m, q, it->second, cfg);
    });
    return out;
}

inline std::vector<DknSet> read_dkn_sets(const std::string& path) {
    std::vector<DknSet> out;
    for (const auto& j : read_lines(path)) out.push_back(dkn_set_from_json(j));
    return out;
}

inline void write_dkn_sets(const std::string& path, const std::vector<DknSet>& sets) {
    std::vector<nlohmann::json> recs;
    for (const auto& s : sets) recs.push_back(to_json(s));
    write_lines(path, recs);
}

/// Splits each language's queries by relation, builds one bank per
/// language/relation from the mining part, and checks the rest.
inline FactCheckReport fact_check_experiment(const Model& m, const Corpus& corpus, Architecture arch,
                                             const std::vector<DknSet>& dkn, double ratio, double t_percent,
                                             std::optional<double> lambda, std::uint64_t seed) {
    std::map<std::string, const DknSet*> dkn_by_query;
    for (const auto& d : dkn) dkn_by_query[d.query_id] = &d;
    std::map<std::string, WrongFact> wrong;
    for (const auto& w : corpus.wrong_facts) wrong[query_id(w.fact_id, w.lang_id, arch)] = w;

    std::map<std::string, DknBank> banks;
    std::vector<ClozeQuery> checking;
    for (const auto& lang : corpus.lang_ids()) {
        std::vector<ClozeQuery> qs;
        for (const auto& q : corpus.queries_for(arch))
            if (q.lang_id == lang) qs.push_back(q);
        const auto split = split_by_relation(qs, ratio, derive_seed(seed, "split/" + arch_tag(arch) + "/" + lang));
        std::map<std::string, std::pair<std::vector<DknSet>, std::vector<ClozeQuery>>> mining;
        for (const auto& q : split.mining) {
            auto it = dkn_by_query.find(q.id);
            if (it == dkn_by_query.end()) throw PreconditionError("no DKN record for mining query '" + q.id + "'");
            mining[bank_key(q)].first.push_back(*it->second);
            mining[bank_key(q)].second.push_back(q);
        }
        for (const auto& [key, part] : mining) {
            auto bank = build_dkn_bank(m, key, part.first, part.second, t_percent);
            if (lambda) bank.lambda = *lambda;
            banks[key] = bank;
        }
        checking.insert(checking.end(), split.checking.begin(), split.checking.end());
    }
    return run_fact_check(m, checking, wrong, banks, t_percent);
}

// ---------------------------------------------------------------------------
// Stage bookkeeping

struct Manifest {
    std::string stage;
    std::string config_hash;
    std::map<std::string, std::string> inputs;  // path relative to run dir -> checksum
    std::map<std::string, std::string> outputs; // file name -> checksum
    nlohmann::json notes = nlohmann::json::object();
};

inline nlohmann::json to_json(const Manifest& m) {
    return {{"stage", m.stage}, {"config_hash", m.config_hash}, {"inputs", m.inputs}, {"outputs", m.outputs}, {"notes", m.notes}};
}

class RunDirectory {
public:
    RunDirectory(fs::path root, std::string config_hash) : root_(std::move(root)), hash_(std::move(config_hash)) {}

    const fs::path& root() const { return root_; }
    fs::path stage_dir(const std::string& stage) const { return root_ / stage; }
    std::string file(const std::string& stage, const std::string& name) const { return (root_ / stage / name).string(); }

    /// True when the stage manifest matches the config, the recorded inputs
    /// still have their recorded checksums, and every output is intact.
    bool is_complete(const std::string& stage) const {
        const auto mpath = stage_dir(stage) / "manifest.json";
        if (!fs::exists(mpath)) return false;
        try {
            const auto j = read_json(mpath.string());
            if (j.at("config_hash").get<std::string>() != hash_) return false;
            for (const auto& [rel, sum] : j.at("inputs").items()) {
                const auto p = root_ / rel;
                if (!fs::exists(p) || file_checksum(p.string()) != sum.get<std::string>()) return false;
            }
            for (const auto& [name, sum] : j.at("outputs").items()) {
                const auto p = stage_dir(stage) / name;
                if (!fs::exists(p) || file_checksum(p.string()) != sum.get<std::string>()) return false;
            }
            return true;
        } catch (const std::exception&) {
            return false;
        }
    }

    nlohmann::json notes(const std::string& stage) const {
        return read_json((stage_dir(stage) / "manifest.json").string()).at("notes");
    }

    /// Clears a stage directory ahead of recomputation.
    void reset(const std::string& stage) const {
        fs::remove_all(stage_dir(stage));
        fs::create_directories(stage_dir(stage));
    }

    void finish(const std::string& stage, const std::vector<std::string>& input_stages, nlohmann::json notes) const {
        Manifest m;
        m.stage = stage;
        m.config_hash = hash_;
        m.notes = std::move(notes);
        for (const auto& in : input_stages)
            for (const auto& e : fs::directory_iterator(stage_dir(in))) {
                if (!e.is_regular_file() || e.path().filename() == "manifest.json") continue;
                m.inputs[in + "/" + e.path().filename().string()] = file_checksum(e.path().string());
            }
        std::vector<fs::path> files;
        for (const auto& e : fs::directory_iterator(stage_dir(stage)))
            if (e.is_regular_file() && e.path().filename() != "manifest.json") files.push_back(e.path());
        for (const auto& f : files) m.outputs[f.filename().string()] = file_checksum(f.string());
        write_json((stage_dir(stage) / "manifest.json").string(), to_json(m));
    }

private:
    fs::path root_;
    std::string hash_;
};

inline const std::vector<std::string>& stage_names() {
    static const std::vector<std::string> names{"01_corpus",    "02_train",      "03_locate",     "04_likn", "05_dkn",
                                                "06_edit_eval", "07_xling_eval", "08_fact_check", "09_report"};
    return names;
}

struct RunOptions {
    int workers = 1;
    LogFn log;
};

struct RunResult {
    fs::path run_dir;
    std::string report_checksum;
    std::vector<std::string> stages_run;
    std::vector<std::string> stages_reused;
};

// ---------------------------------------------------------------------------
// Stages

namespace stages {

struct Env {
    const RunConfig& cfg;
    const RunDirectory& dir;
    const RunOptions& opt;

    void log(const std::string& s) const {
        if (opt.log) opt.log(s);
    }
    Corpus corpus() const { return load_corpus(dir.stage_dir("01_corpus").string()); }
    Model model(Architecture a) const { return load_model(dir.file("02_train", "model_" + arch_tag(a) + ".ckpt")); }
    std::vector<KnowledgeNeuronSet> kn(Architecture a, bool zero = false) const {
        return read_kn_sets(dir.file("03_locate", (zero ? "kn_zero_" : "kn_") + arch_tag(a) + ".jsonl"));
    }
    std::map<std::string, std::string> partners(const Corpus& c, Architecture a) const {
        return pair_irrelevant(c.queries_for(a), derive_seed(cfg.seed, "partners/" + arch_tag(a)));
    }
};

inline nlohmann::json corpus(const Env& e) {
    auto langs = make_synthetic_languages(e.cfg.corpus.languages, e.cfg.corpus.relations);
    const auto c = generate_corpus(e.cfg.corpus.relations, e.cfg.corpus.facts_per_relation, std::move(langs),
                                   derive_seed(e.cfg.seed, "corpus"));
    save_corpus(c, e.dir.stage_dir("01_corpus").string());
    return {{"facts", c.facts.size()}, {"queries", c.queries.size()}, {"vocab_size", c.vocab.size()}};
}

inline nlohmann::json train_models(const Env& e) {
    const auto c = e.corpus();
    nlohmann::json notes = nlohmann::json::object();
    for (auto arch : e.cfg.model.architectures) {
        const auto qs = c.queries_for(arch);
        TrainLog log;
        const auto m = train(qs, e.cfg.model_config(arch, c.vocab.size()), e.cfg.model.train, &log);
        nlohmann::json epochs = nlohmann::json::array();
        for (const auto& s : log.epochs) epochs.push_back({{"epoch", s.epoch}, {"loss", s.loss}, {"accuracy", s.accuracy}});
        double mean_p = 0.0;
        for (const auto& q : qs) mean_p += gold_probability(m, q);
        mean_p /= static_cast<double>(qs.size());
        write_json(e.dir.file("02_train", "train_log_" + arch_tag(arch) + ".json"),
                   {{"epochs", epochs}, {"final_accuracy", log.final_accuracy}, {"mean_gold_prob", mean_p}});
        save_model(m, e.dir.file("02_train", "model_" + arch_tag(arch) + ".ckpt"));
        e.log("  " + arch_tag(arch) + ": top-1 accuracy " + fixed(log.final_accuracy, 4) + ", mean gold p " +
              fixed(mean_p, 4));
        if (log.final_accuracy < e.cfg.model.min_accuracy)
            throw PreconditionError(arch_tag(arch) + " model reached top-1 accuracy " + fixed(log.final_accuracy, 4) +
                                    " < required " + fixed(e.cfg.model.min_accuracy, 2));
        notes[arch_tag(arch)] = {{"final_accuracy", log.final_accuracy}, {"mean_gold_prob", mean_p}};
    }
    return notes;
}

inline nlohmann::json locate(const Env& e) {
    const auto c = e.corpus();
    nlohmann::json notes = nlohmann::json::object();
    for (auto arch : e.cfg.model.architectures) {
        const auto m = e.model(arch);
        const auto qs = c.queries_for(arch);
        const auto acfg = e.cfg.attribution_config();
        e.log("  " + arch_tag(arch) + ": attributing " + std::to_string(qs.size()) + " queries");
        const auto r = locate_queries(m, qs, acfg, e.opt.workers, e.opt.log);
        write_kn_sets(e.dir.file("03_locate", "kn_" + arch_tag(arch) + ".jsonl"), r.sets);
        write_lines(e.dir.file("03_locate", "attribution_" + arch_tag(arch) + ".jsonl"), r.attributions);
        double mean = 0.0;
        for (const auto& s : r.sets) mean += static_cast<double>(s.neurons.size());
        notes[arch_tag(arch)] = {{"mean_kn_size", mean / static_cast<double>(r.sets.size())}};
        if (e.cfg.attribution.zero_baseline_control) {
            auto zcfg = acfg;
            zcfg.baseline_mode = BaselineMode::zero;
            e.log("  " + arch_tag(arch) + ": zero-baseline control");
            const auto z = locate_queries(m, qs, zcfg, e.opt.workers);
            write_kn_sets(e.dir.file("03_locate", "kn_zero_" + arch_tag(arch) + ".jsonl"), z.sets);
        }
    }
    return notes;
}

inline nlohmann::json likn(const Env& e) {
    if (e.cfg.corpus.languages < 2) return {{"skipped", "needs at least two languages"}};
    nlohmann::json notes = nlohmann::json::object();
    for (auto arch : e.cfg.model.architectures) {
        const auto sets = likn_from_sets(e.kn(arch));
        std::vector<nlohmann::json> recs;
        int empty = 0;
        for (const auto& s : sets) {
            recs.push_back(to_json(s));
            empty += s.neurons.empty();
        }
        write_lines(e.dir.file("04_likn", "likn_" + arch_tag(arch) + ".jsonl"), recs);
        notes[arch_tag(arch)] = {{"facts", sets.size()}, {"empty", empty}};
    }
    return notes;
}

inline nlohmann::json dkn(const Env& e) {
    const auto c = e.corpus();
    nlohmann::json notes = nlohmann::json::object();
    for (auto arch : e.cfg.model.architectures) {
        const auto m = e.model(arch);
        const auto sets = dkn_for_queries(m, c.queries_for(arch), by_query(e.kn(arch)), e.cfg.dkn, e.opt.workers);
        write_dkn_sets(e.dir.file("05_dkn", "dkn_" + arch_tag(arch) + ".jsonl"), sets);
        std::size_t pairs = 0, with = 0;
        for (const auto& s : sets) {
            pairs += s.pairs.size();
            with += !s.pairs.empty();
        }
        e.log("  " + arch_tag(arch) + ": " + std::to_string(pairs) + " DKN pairs over " + std::to_string(with) + " queries");
        notes[arch_tag(arch)] = {{"pairs", pairs}, {"queries_with_pairs", with}};
    }
    return notes;
}

inline nlohmann::json edit_eval(const Env& e) {
    const auto c = e.corpus();
    for (auto arch : e.cfg.model.architectures) {
        const auto m = e.model(arch);
        const auto qs = c.queries_for(arch);
        const auto partners = e.partners(c, arch);
        const auto amig = by_query(e.kn(arch));
        const auto& eo = e.cfg.evaluation.edit;
        nlohmann::json out;
        out["amig"] = to_json(editing_success_rate(m, qs, amig, partners, eo));
        const auto random = random_neuron_sets(amig, m.config, derive_seed(e.cfg.seed, "random/" + arch_tag(arch)));
        out["random"] = to_json(editing_success_rate(m, qs, random, partners, eo));
        if (e.cfg.attribution.zero_baseline_control)
            out["zero_baseline"] = to_json(editing_success_rate(m, qs, by_query(e.kn(arch, true)), partners, eo));
        out["partners"] = partners;
        write_json(e.dir.file("06_edit_eval", "sr_" + arch_tag(arch) + ".json"), out);
    }
    return nlohmann::json::object();
}

inline nlohmann::json xling_eval(const Env& e) {
    if (e.cfg.corpus.languages != 2) return {{"skipped", "needs exactly two languages"}};
    const auto c = e.corpus();
    for (auto arch : e.cfg.model.architectures) {
        const auto m = e.model(arch);
        XlingInputs in;
        in.queries = c.queries_for(arch);
        const auto kn_sets = e.kn(arch);
        in.kn = by_query(kn_sets);
        for (auto& s : likn_from_sets(kn_sets)) in.likn[s.fact_id] = std::move(s);
        in.partners = e.partners(c, arch);
        nlohmann::json out;
        for (auto p : {XlingProtocol::likn, XlingProtocol::mono_kn, XlingProtocol::seq_kn})
            out[std::string(to_string(p))] = to_json(cross_lingual_edit_experiment(m, in, p, e.cfg.evaluation.edit));
        write_json(e.dir.file("07_xling_eval", "xling_" + arch_tag(arch) + ".json"), out);
    }
    return nlohmann::json::object();
}

inline nlohmann::json fact_check(const Env& e) {
    const auto c = e.corpus();
    for (auto arch : e.cfg.model.architectures) {
        const auto m = e.model(arch);
        const auto dkn = read_dkn_sets(e.dir.file("05_dkn", "dkn_" + arch_tag(arch) + ".jsonl"));
        const auto rep = fact_check_experiment(m, c, arch, dkn, e.cfg.evaluation.split_ratio, e.cfg.t_percent,
                                               e.cfg.evaluation.lambda, e.cfg.seed);
        write_json(e.dir.file("08_fact_check", "fact_check_" + arch_tag(arch) + ".json"), to_json(rep));
        std::vector<nlohmann::json> items;
        for (const auto& it : rep.items)
            items.push_back({{"query_id", it.query_id},
                             {"candidate", c.vocab.token(it.candidate)},
                             {"gold", it.gold},
                             {"with_dkn", it.with_dkn},
                             {"wo_dkn", it.baseline}});
        write_lines(e.dir.file("08_fact_check", "statements_" + arch_tag(arch) + ".jsonl"), items);
    }
    return nlohmann::json::object();
}

inline std::string sr_cell(const nlohmann::json& sr) {
    if (sr.at("sr_total").is_null()) return sr.at("total_status").get<std::string>();
    return fixed(sr.at("sr_total").get<double>(), 3);
}

inline nlohmann::json report(const Env& e) {
    const auto c = e.corpus();
    const int L = e.cfg.model.layers;
    nlohmann::json rep;
    rep["config_hash"] = e.cfg.hash();
    std::ostringstream md;
    md << "# Run report\n\nConfig hash `" << e.cfg.hash() << "`.\n";
    nlohmann::json warnings = nlohmann::json::array();
    auto emit_hist = [&](const LayerHistogram& h, const std::string& stem) {
        std::ofstream(e.dir.file("09_report", stem + ".csv")) << to_csv(h);
        std::ofstream(e.dir.file("09_report", stem + ".svg")) << to_svg(h);
        if (h.empty) warnings.push_back("histogram '" + h.label + "' is empty");
        nlohmann::json pct = nlohmann::json::array();
        for (double p : h.percent) pct.push_back(std::round(p * 1e4) / 1e4);
        return nlohmann::json{{"label", h.label}, {"counts", h.counts}, {"percent", pct}, {"file", stem + ".svg"}};
    };

    for (auto arch : e.cfg.model.architectures) {
        const auto tag = arch_tag(arch);
        nlohmann::json a;
        const auto tl = read_json(e.dir.file("02_train", "train_log_" + tag + ".json"));
        a["train"] = {{"final_accuracy", tl.at("final_accuracy")}, {"mean_gold_prob", tl.at("mean_gold_prob")}};

        const auto kn = e.kn(arch);
        nlohmann::json hists = nlohmann::json::array();
        for (const auto& lang : c.lang_ids()) {
            std::vector<std::set<NeuronId>> sets;
            for (const auto& s : kn)
                if (s.lang_id == lang) sets.push_back(s.neurons);
            hists.push_back(emit_hist(layer_distribution(sets, L, tag + " " + lang + "-KN"), "hist_" + tag + "_" + lang + "_kn"));
        }
        if (e.cfg.corpus.languages >= 2) {
            std::vector<std::set<NeuronId>> sets;
            for (const auto& j : read_lines(e.dir.file("04_likn", "likn_" + tag + ".jsonl")))
                sets.push_back(neurons_from_json(j.at("neurons")));
            hists.push_back(emit_hist(layer_distribution(sets, L, tag + " LIKN"), "hist_" + tag + "_likn"));
        }
        const auto dkn = read_dkn_sets(e.dir.file("05_dkn", "dkn_" + tag + ".jsonl"));
        {
            std::vector<std::set<NeuronId>> sets;
            std::size_t pairs = 0;
            for (const auto& d : dkn) {
                sets.push_back(d.neurons());
                pairs += d.pairs.size();
            }
            hists.push_back(emit_hist(layer_distribution(sets, L, tag + " DKN"), "hist_" + tag + "_dkn"));
            a["dkn_pairs"] = pairs;
        }
        a["histograms"] = hists;

        const auto sr = read_json(e.dir.file("06_edit_eval", "sr_" + tag + ".json"));
        a["editing"] = {{"amig", sr.at("amig")}, {"random", sr.at("random")}};
        if (sr.contains("zero_baseline")) a["editing"]["zero_baseline"] = sr.at("zero_baseline");
        if (e.cfg.corpus.languages == 2) {
            const auto x = read_json(e.dir.file("07_xling_eval", "xling_" + tag + ".json"));
            nlohmann::json xs;
            for (const auto& [p, v] : x.items()) xs[p] = {{"pooled", v.at("pooled")}, {"n_facts", v.at("n_facts")}, {"n_skipped", v.at("n_skipped")}};
            a["cross_lingual"] = xs;
        }
        const auto fc = read_json(e.dir.file("08_fact_check", "fact_check_" + tag + ".json"));
        a["fact_check"] = {{"with_dkn", fc.at("with_dkn")}, {"wo_dkn", fc.at("wo_dkn")}, {"wo_dkn_rule", fc.at("wo_dkn_rule")}};
        rep["architectures"][tag] = a;

        md << "\n## " << tag << "\n\n";
        md << "Top-1 accuracy " << fixed(tl.at("final_accuracy").get<double>(), 4) << ", mean gold probability "
           << fixed(tl.at("mean_gold_prob").get<double>(), 4) << ".\n\n";
        md << "| neuron sets | SR suppress | SR enhance | SR total |\n|---|---|---|---|\n";
        for (const auto& [name, v] : a["editing"].items()) {
            auto cell = [](const nlohmann::json& m) {
                return m.at("sr").is_null() ? m.at("status").get<std::string>() : fixed(m.at("sr").get<double>(), 3);
            };
            md << "| " << name << " | " << cell(v.at("suppress")) << " | " << cell(v.at("enhance")) << " | "
               << sr_cell(v) << " |\n";
        }
        if (a.contains("cross_lingual")) {
            md << "\n| cross-lingual protocol | facts | skipped | SR total (pooled) |\n|---|---|---|---|\n";
            for (const auto& [p, v] : a["cross_lingual"].items())
                md << "| " << p << " | " << v.at("n_facts") << " | " << v.at("n_skipped") << " | " << sr_cell(v.at("pooled"))
                   << " |\n";
        }
        md << "\n| fact check | P | R | F1 |\n|---|---|---|---|\n";
        for (const char* k : {"with_dkn", "wo_dkn"}) {
            const auto& r = fc.at(k);
            md << "| " << k << " | " << fixed(r.at("precision").get<double>(), 3) << " | "
               << fixed(r.at("recall").get<double>(), 3) << " | " << fixed(r.at("f1").get<double>(), 3) << " |\n";
        }
        md << "\nwo_dkn rule: " << fc.at("wo_dkn_rule").get<std::string>() << ".\n";
        md << "\n| histogram | per-layer % |\n|---|---|\n";
        for (const auto& h : hists) {
            md << "| " << h.at("label").get<std::string>() << " |";
            for (const auto& p : h.at("percent")) md << ' ' << fixed(p.get<double>(), 1);
            md << " |\n";
        }
        md << "\nDKN pairs: " << a["dkn_pairs"] << ".\n";
    }
    rep["warnings"] = warnings;
    write_json(e.dir.file("09_report", "report.json"), rep);
    std::ofstream(e.dir.file("09_report", "report.md")) << md.str();
    return {{"report_checksum", file_checksum(e.dir.file("09_report", "report.json"))}};
}

} // namespace stages

/// Runs (or resumes) every stage in order. A stage failure is rethrown with
/// the stage name; outputs of finished stages stay on disk.
inline RunResult run_pipeline(const RunConfig& cfg, const RunOptions& opt = {}) {
    cfg.validate();
    RunResult res;
    res.run_dir = fs::path(cfg.output_dir);
    fs::create_directories(res.run_dir);
    write_json((res.run_dir / "config.json").string(), to_json(cfg));
    const RunDirectory dir(res.run_dir, cfg.hash());
    const stages::Env env{cfg, dir, opt};

    using StageFn = nlohmann::json (*)(const stages::Env&);
    const std::vector<std::tuple<std::string, StageFn, std::vector<std::string>>> plan{
        {"01_corpus", stages::corpus, {}},
        {"02_train", stages::train_models, {"01_corpus"}},
        {"03_locate", stages::locate, {"01_corpus", "02_train"}},
        {"04_likn", stages::likn, {"03_locate"}},
        {"05_dkn", stages::dkn, {"01_corpus", "02_train", "03_locate"}},
        {"06_edit_eval", stages::edit_eval, {"01_corpus", "02_train", "03_locate"}},
        {"07_xling_eval", stages::xling_eval, {"01_corpus", "02_train", "03_locate"}},
        {"08_fact_check", stages::fact_check, {"01_corpus", "02_train", "05_dkn"}},
        {"09_report", stages::report,
         {"02_train", "03_locate", "04_likn", "05_dkn", "06_edit_eval", "07_xling_eval", "08_fact_check"}},
    };
    for (const auto& [name, fn, inputs] : plan) {
        if (dir.is_complete(name)) {
            env.log("[" + name + "] up to date");
            res.stages_reused.push_back(name);
            continue;
        }
        env.log("[" + name + "] running");
        dir.reset(name);
        nlohmann::json notes;
        try {
            notes = fn(env);
        } catch (const std::exception& ex) {
            throw Error("stage '" + name + "' failed: " + ex.what());
        }
        dir.finish(name, inputs, notes);
        res.stages_run.push_back(name);
    }
    res.report_checksum = file_checksum(dir.file("09_report", "report.json"));
    return res;
}

} // namespace knlab
