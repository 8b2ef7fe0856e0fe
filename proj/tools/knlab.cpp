// knlab command-line front end: one subcommand per pipeline stage plus
// `run` for the whole pipeline.

#include <iostream>

#include <CLI11.hpp>

#include <knlab/knlab.hpp>

using namespace knlab;

namespace {

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    int workers = 1;
    bool deterministic = false;

    int effective_workers() const { return deterministic ? 1 : std::max(1, workers); }

    RunConfig config() const {
        RunConfig c = config_path.empty() ? default_run_config(2) : load_run_config(config_path);
        if (seed) c.seed = *seed;
        return c;
    }

    std::uint64_t seed_or(std::uint64_t fallback) const { return seed.value_or(config_path.empty() ? fallback : config().seed); }
};

void log_line(const std::string& s) { std::cerr << s << '\n'; }

std::map<std::string, double> parse_taus(const std::vector<std::string>& items) {
    std::map<std::string, double> out;
    for (const auto& it : items) {
        const auto eq = it.find('=');
        if (eq == std::string::npos) throw ConfigError("--tau expects lang=value, got '" + it + "'");
        try {
            out[it.substr(0, eq)] = std::stod(it.substr(eq + 1));
        } catch (const std::exception&) {
            throw ConfigError("--tau value is not a number in '" + it + "'");
        }
    }
    return out;
}

std::string sr_line(const std::string& name, const SRReport& r) {
    auto cell = [](const ModeSR& m) { return m.status == RatioStatus::finite ? fixed(m.sr, 3) : std::string(to_string(m.status)); };
    const std::string total =
        r.total_status == RatioStatus::finite ? fixed(r.sr_total, 3) : std::string(to_string(r.total_status));
    return name + ": SR_suppress " + cell(r.suppress) + ", SR_enhance " + cell(r.enhance) + ", SR " + total;
}

std::vector<ClozeQuery> queries_of(const Corpus& c, const Model& m) { return c.queries_for(m.config.architecture); }

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"knlab: locate, analyse and edit knowledge neurons in toy transformers"};
    app.require_subcommand(1);
    Globals g;
    std::uint64_t seed_value = 0;
    app.add_option("--config", g.config_path, "Run configuration (JSON)")->check(CLI::ExistingFile);
    auto* seed_opt = app.add_option("--seed", seed_value, "Base seed (overrides the config)");
    app.add_option("--workers", g.workers, "Worker threads for per-query stages")->check(CLI::PositiveNumber);
    app.add_flag("--deterministic", g.deterministic, "Single worker; bit-identical outputs");
    app.fallthrough();

    // gen-corpus
    auto* gen = app.add_subcommand("gen-corpus", "Generate the synthetic multilingual corpus");
    int relations = 2, facts = 8, languages = 2;
    std::string out_dir;
    gen->add_option("--relations", relations)->check(CLI::PositiveNumber);
    gen->add_option("--facts-per-relation", facts)->check(CLI::PositiveNumber);
    gen->add_option("--languages", languages)->check(CLI::PositiveNumber);
    gen->add_option("--out-dir", out_dir)->required();

    // train
    auto* tr = app.add_subcommand("train", "Train one toy model on a corpus");
    std::string corpus_dir, arch = "ae", model_out;
    ModelParams mp;
    tr->add_option("--corpus", corpus_dir, "Corpus directory")->required()->check(CLI::ExistingDirectory);
    tr->add_option("--arch", arch, "ae or ar");
    tr->add_option("--layers", mp.layers);
    tr->add_option("--dim", mp.dim);
    tr->add_option("--ffn-dim", mp.ffn_dim);
    tr->add_option("--heads", mp.heads);
    tr->add_option("--max-seq-len", mp.max_seq_len);
    tr->add_option("--dropout", mp.dropout);
    tr->add_option("--epochs", mp.train.epochs);
    tr->add_option("--lr", mp.train.learning_rate);
    tr->add_option("--label-smoothing", mp.train.label_smoothing);
    tr->add_option("--out", model_out, "Checkpoint path")->required();

    // locate
    auto* loc = app.add_subcommand("locate", "Attribute queries and select knowledge neurons");
    std::string model_path, queries_path;
    int steps = 20;
    std::vector<std::string> taus;
    std::string baseline_mode = "adapted", coeff = "standard";
    loc->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    loc->add_option("--queries", queries_path, "queries.jsonl")->required()->check(CLI::ExistingFile);
    loc->add_option("--steps", steps)->check(CLI::PositiveNumber);
    loc->add_option("--tau", taus, "lang=value, repeatable")->required();
    loc->add_option("--baseline-mode", baseline_mode, "adapted or zero");
    loc->add_option("--riemann-coeff", coeff, "standard or paper");
    loc->add_option("--out", out_dir, "Output directory")->required();

    // likn
    auto* lk = app.add_subcommand("likn", "Intersect per-language knowledge neurons per fact");
    std::string sets_path, out_file;
    lk->add_option("--neuron-sets", sets_path)->required()->check(CLI::ExistingFile);
    lk->add_option("--out", out_file)->required();

    // dkn
    auto* dk = app.add_subcommand("dkn", "Detect degenerate knowledge-neuron pairs");
    DknConfig dcfg;
    dk->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    dk->add_option("--corpus", corpus_dir)->required()->check(CLI::ExistingDirectory);
    dk->add_option("--neuron-sets", sets_path)->required()->check(CLI::ExistingFile);
    dk->add_option("--t-low", dcfg.t_low);
    dk->add_option("--t-high", dcfg.t_high);
    dk->add_option("--out", out_file)->required();

    // edit-eval
    auto* ee = app.add_subcommand("edit-eval", "Editing success rate of located neurons");
    std::string mode = "both";
    ExclusionRule excl;
    ee->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    ee->add_option("--corpus", corpus_dir)->required()->check(CLI::ExistingDirectory);
    ee->add_option("--neurons", sets_path)->required()->check(CLI::ExistingFile);
    ee->add_option("--mode", mode, "suppress, enhance or both (printed summary)")
        ->check(CLI::IsMember({"suppress", "enhance", "both"}));
    ee->add_option("--exclude-top-fraction", excl.top_fraction);
    ee->add_option("--out", out_file)->required();

    // xling-eval
    auto* xe = app.add_subcommand("xling-eval", "Cross-lingual editing protocols");
    std::string protocol = "all";
    xe->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    xe->add_option("--corpus", corpus_dir)->required()->check(CLI::ExistingDirectory);
    xe->add_option("--neurons", sets_path)->required()->check(CLI::ExistingFile);
    xe->add_option("--protocol", protocol)->check(CLI::IsMember({"likn", "mono", "seq", "all"}));
    xe->add_option("--out", out_file)->required();

    // fact-check
    auto* fc = app.add_subcommand("fact-check", "DKN-bank fact checking against the top-1 baseline");
    std::string dkn_path;
    double t_percent = 0.3, split_ratio = 0.5;
    std::optional<double> lambda;
    fc->add_option("--model", model_path)->required()->check(CLI::ExistingFile);
    fc->add_option("--corpus", corpus_dir)->required()->check(CLI::ExistingDirectory);
    fc->add_option("--dkn", dkn_path, "DKN sets from `dkn`")->required()->check(CLI::ExistingFile);
    fc->add_option("--t-percent", t_percent);
    fc->add_option("--split-ratio", split_ratio);
    fc->add_option("--lambda", lambda, "Fixed threshold (default: median over mining statements)");
    fc->add_option("--out", out_file)->required();

    // run / report
    auto* run = app.add_subcommand("run", "Run or resume the whole pipeline");
    std::string run_out;
    run->add_option("--out-dir", run_out, "Overrides output_dir from the config");
    auto* rep = app.add_subcommand("report", "Print the report of a finished run (resuming it if needed)");
    rep->add_option("--out-dir", run_out, "Overrides output_dir from the config");

    CLI11_PARSE(app, argc, argv);
    if (seed_opt->count()) g.seed = seed_value;

    try {
        if (*gen) {
            const auto c = generate_corpus(relations, facts, make_synthetic_languages(languages, relations), g.seed_or(2024));
            fs::create_directories(out_dir);
            save_corpus(c, out_dir);
            std::cout << c.facts.size() << " facts, " << c.queries.size() << " queries -> " << out_dir << '\n';
        } else if (*tr) {
            const auto c = load_corpus(corpus_dir);
            RunConfig rc;
            rc.seed = g.seed_or(2024);
            rc.model = mp;
            const auto a = parse_architecture(arch);
            TrainLog log;
            const auto m = train(c.queries_for(a), rc.model_config(a, c.vocab.size()), mp.train, &log);
            save_model(m, model_out);
            std::cout << arch << ": top-1 accuracy " << fixed(log.final_accuracy, 4) << " -> " << model_out << '\n';
        } else if (*loc) {
            const auto m = load_model(model_path);
            AttributionConfig ac;
            ac.riemann_steps = steps;
            ac.tau_per_language = parse_taus(taus);
            ac.baseline_mode = parse_baseline_mode(baseline_mode);
            ac.coeff = parse_riemann_coeff(coeff);
            std::vector<ClozeQuery> qs;
            for (auto& q : read_queries(queries_path))
                if (q.architecture == m.config.architecture) qs.push_back(std::move(q));
            if (qs.empty()) throw PreconditionError("no queries for architecture " + arch_tag(m.config.architecture));
            std::set<std::string> langs;
            for (const auto& q : qs) langs.insert(q.lang_id);
            ac.validate({langs.begin(), langs.end()});
            fs::create_directories(out_dir);
            const auto r = locate_queries(m, qs, ac, g.effective_workers(), log_line);
            write_kn_sets(out_dir + "/kn_sets.jsonl", r.sets);
            write_lines(out_dir + "/attribution.jsonl", r.attributions);
            std::cout << r.sets.size() << " neuron sets -> " << out_dir << '\n';
        } else if (*lk) {
            std::vector<nlohmann::json> recs;
            for (const auto& s : likn_from_sets(read_kn_sets(sets_path))) recs.push_back(to_json(s));
            write_lines(out_file, recs);
            std::cout << recs.size() << " facts -> " << out_file << '\n';
        } else if (*dk) {
            const auto m = load_model(model_path);
            const auto c = load_corpus(corpus_dir);
            const auto kn = by_query(read_kn_sets(sets_path));
            std::vector<ClozeQuery> qs;
            for (const auto& q : queries_of(c, m))
                if (kn.count(q.id)) qs.push_back(q);
            const auto sets = dkn_for_queries(m, qs, kn, dcfg, g.effective_workers());
            write_dkn_sets(out_file, sets);
            std::size_t pairs = 0;
            for (const auto& s : sets) pairs += s.pairs.size();
            std::cout << pairs << " DKN pairs over " << sets.size() << " queries -> " << out_file << '\n';
        } else if (*ee) {
            const auto m = load_model(model_path);
            const auto c = load_corpus(corpus_dir);
            const auto qs = queries_of(c, m);
            const auto tag = arch_tag(m.config.architecture);
            const auto seed = g.seed_or(2024);
            const auto partners = pair_irrelevant(qs, derive_seed(seed, "partners/" + tag));
            const auto sets = by_query(read_kn_sets(sets_path));
            EditOptions eo;
            eo.exclusion = excl;
            const auto amig = editing_success_rate(m, qs, sets, partners, eo);
            const auto rnd = editing_success_rate(m, qs, random_neuron_sets(sets, m.config, derive_seed(seed, "random/" + tag)),
                                                  partners, eo);
            write_json(out_file, {{"amig", to_json(amig)}, {"random", to_json(rnd)}, {"partners", partners}});
            for (const auto& [name, r] : {std::pair<std::string, const SRReport&>{"located", amig}, {"random", rnd}}) {
                if (mode == "both") {
                    std::cout << sr_line(name, r) << '\n';
                } else {
                    const auto& ms = mode == "suppress" ? r.suppress : r.enhance;
                    std::cout << name << ": SR_" << mode << ' '
                              << (ms.status == RatioStatus::finite ? fixed(ms.sr, 3) : std::string(to_string(ms.status)))
                              << '\n';
                }
            }
        } else if (*xe) {
            const auto m = load_model(model_path);
            const auto c = load_corpus(corpus_dir);
            const auto tag = arch_tag(m.config.architecture);
            XlingInputs in;
            in.queries = queries_of(c, m);
            const auto kn_sets = read_kn_sets(sets_path);
            in.kn = by_query(kn_sets);
            for (auto& s : likn_from_sets(kn_sets)) in.likn[s.fact_id] = std::move(s);
            in.partners = pair_irrelevant(in.queries, derive_seed(g.seed_or(2024), "partners/" + tag));
            std::vector<XlingProtocol> ps;
            if (protocol == "likn" || protocol == "all") ps.push_back(XlingProtocol::likn);
            if (protocol == "mono" || protocol == "all") ps.push_back(XlingProtocol::mono_kn);
            if (protocol == "seq" || protocol == "all") ps.push_back(XlingProtocol::seq_kn);
            nlohmann::json out;
            for (auto p : ps) {
                const auto r = cross_lingual_edit_experiment(m, in, p);
                out[std::string(to_string(p))] = to_json(r);
                std::cout << sr_line(std::string(to_string(p)) + " (" + std::to_string(r.n_skipped) + " facts skipped)",
                                     r.pooled)
                          << '\n';
            }
            write_json(out_file, out);
        } else if (*fc) {
            const auto m = load_model(model_path);
            const auto c = load_corpus(corpus_dir);
            const auto r = fact_check_experiment(m, c, m.config.architecture, read_dkn_sets(dkn_path), split_ratio,
                                                 t_percent, lambda, g.seed_or(2024));
            write_json(out_file, to_json(r));
            for (const auto& [name, p] : {std::pair<std::string, const PRF1&>{"with_DKN", r.with_dkn}, {"wo_DKN", r.wo_dkn}})
                std::cout << name << ": P " << fixed(p.precision, 3) << " R " << fixed(p.recall, 3) << " F1 "
                          << fixed(p.f1, 3) << '\n';
        } else if (*run || *rep) {
            auto cfg = g.config();
            if (!run_out.empty()) cfg.output_dir = run_out;
            RunOptions ro;
            ro.workers = g.effective_workers();
            ro.log = log_line;
            const auto r = run_pipeline(cfg, ro);
            if (*rep) {
                std::ifstream in(r.run_dir / "09_report" / "report.md");
                std::cout << in.rdbuf();
            }
            std::cout << "report checksum " << r.report_checksum << " (" << r.stages_run.size() << " stages run, "
                      << r.stages_reused.size() << " reused) in " << r.run_dir.string() << '\n';
        }
    } catch (const ConfigError& e) {
        std::cerr << "configuration error: " << e.what() << '\n';
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
