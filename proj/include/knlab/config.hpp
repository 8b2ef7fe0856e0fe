#pragma once

// Run configuration: one JSON document (schema_version 1) covering every
// stage. Unknown keys are rejected so typos fail loudly.

#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "knlab/evaluation.hpp"

namespace knlab {

inline constexpr int kSchemaVersion = 1;

struct CorpusParams {
    int relations = 2;
    int facts_per_relation = 8;
    int languages = 2;
};

struct ModelParams {
    std::vector<Architecture> architectures{Architecture::auto_encoding, Architecture::auto_regressive};
    int layers = 4;
    int dim = 64;
    int heads = 4;
    int ffn_dim = 256;
    int max_seq_len = 16;
    double dropout = 0.1;
    TrainOptions train;
    double min_accuracy = 0.9;
};

struct AttributionParams {
    int steps = 20;
    std::map<std::string, double> tau;
    BaselineMode baseline_mode = BaselineMode::architecture_adapted;
    RiemannCoeff coeff = RiemannCoeff::standard;
    bool zero_baseline_control = true;
};

struct EvaluationParams {
    EditOptions edit;
    double split_ratio = 0.5;
    std::optional<double> lambda; // unset: median over mining statements
};

struct RunConfig {
    int schema_version = kSchemaVersion;
    std::uint64_t seed = 2024;
    CorpusParams corpus;
    ModelParams model;
    AttributionParams attribution;
    DknConfig dkn;
    double t_percent = 0.3;
    EvaluationParams evaluation;
    std::string output_dir = "runs/reference";

    std::vector<std::string> language_ids() const {
        std::vector<std::string> out;
        for (int k = 1; k <= corpus.languages; ++k) out.push_back("L" + std::to_string(k));
        return out;
    }

    AttributionConfig attribution_config() const {
        AttributionConfig a;
        a.riemann_steps = attribution.steps;
        a.tau_per_language = attribution.tau;
        a.baseline_mode = attribution.baseline_mode;
        a.coeff = attribution.coeff;
        return a;
    }

    ModelConfig model_config(Architecture arch, int vocab_size) const {
        ModelConfig c;
        c.architecture = arch;
        c.n_layers = model.layers;
        c.model_dim = model.dim;
        c.n_heads = model.heads;
        c.ffn_dim = model.ffn_dim;
        c.vocab_size = vocab_size;
        c.max_seq_len = model.max_seq_len;
        c.seed = derive_seed(seed, "model/" + std::string(to_string(arch)));
        c.dropout = model.dropout;
        return c;
    }

    void validate() const {
        if (schema_version != kSchemaVersion)
            throw ConfigError("unsupported schema_version " + std::to_string(schema_version));
        if (corpus.relations < 1) throw ConfigError("corpus.relations must be >= 1");
        if (corpus.facts_per_relation < 4) throw ConfigError("corpus.facts_per_relation must be >= 4");
        if (corpus.languages < 1) throw ConfigError("corpus.languages must be >= 1");
        if (model.architectures.empty()) throw ConfigError("model.architectures is empty");
        if (std::set<Architecture>(model.architectures.begin(), model.architectures.end()).size() !=
            model.architectures.size())
            throw ConfigError("model.architectures lists an architecture twice");
        auto mc = model_config(Architecture::auto_encoding, 8);
        mc.validate();
        if (model.train.epochs < 0 || model.train.batch_size < 1 || !(model.train.learning_rate > 0.0))
            throw ConfigError("model: epochs >= 0, batch_size >= 1, lr > 0 required");
        if (!(model.train.label_smoothing >= 0.0 && model.train.label_smoothing < 1.0))
            throw ConfigError("model.label_smoothing must lie in [0, 1)");
        if (!(model.min_accuracy >= 0.0 && model.min_accuracy <= 1.0))
            throw ConfigError("model.min_accuracy must lie in [0, 1]");
        attribution_config().validate(language_ids());
        for (const auto& [lang, t] : attribution.tau) {
            const auto ids = language_ids();
            if (std::find(ids.begin(), ids.end(), lang) == ids.end())
                throw ConfigError("attribution.tau names unknown language '" + lang + "'");
        }
        dkn.validate();
        if (!(t_percent > 0.0 && t_percent <= 1.0)) throw ConfigError("dkn.t_percent must lie in (0, 1]");
        if (!(evaluation.split_ratio > 0.0 && evaluation.split_ratio < 1.0))
            throw ConfigError("evaluation.split_ratio must lie in (0, 1)");
        if (!(evaluation.edit.exclusion.top_fraction >= 0.0 && evaluation.edit.exclusion.top_fraction < 1.0))
            throw ConfigError("evaluation.exclude_top_fraction must lie in [0, 1)");
        if (!(evaluation.edit.enhance_factor > 0.0)) throw ConfigError("evaluation.enhance_factor must be > 0");
        if (corpus.relations < 2) throw ConfigError("corpus.relations must be >= 2 (irrelevant partners)");
        if (output_dir.empty()) throw ConfigError("output_dir is empty");
    }

    /// Hash over everything that affects results (not the output location).
    std::string hash() const;
};

namespace detail {

inline void check_keys(const nlohmann::json& j, const std::string& where, std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be an object");
    for (const auto& [k, v] : j.items()) {
        bool ok = false;
        for (const char* a : allowed) ok = ok || k == a;
        if (!ok) throw ConfigError("unknown key '" + k + "' in " + where);
    }
}

template <class T>
void read_opt(const nlohmann::json& j, const char* key, T& out, const std::string& where) {
    if (!j.contains(key)) return;
    try {
        out = j.at(key).get<T>();
    } catch (const nlohmann::json::exception&) {
        throw ConfigError(where + "." + key + " has the wrong type");
    }
}

} // namespace detail

inline nlohmann::json to_json(const RunConfig& c) {
    nlohmann::json archs = nlohmann::json::array();
    for (auto a : c.model.architectures) archs.push_back(to_string(a));
    nlohmann::json j;
    j["schema_version"] = c.schema_version;
    j["seed"] = c.seed;
    j["corpus"] = {{"relations", c.corpus.relations},
                   {"facts_per_relation", c.corpus.facts_per_relation},
                   {"languages", c.corpus.languages}};
    j["model"] = {{"architectures", archs},
                  {"layers", c.model.layers},
                  {"dim", c.model.dim},
                  {"heads", c.model.heads},
                  {"ffn_dim", c.model.ffn_dim},
                  {"max_seq_len", c.model.max_seq_len},
                  {"dropout", c.model.dropout},
                  {"epochs", c.model.train.epochs},
                  {"lr", c.model.train.learning_rate},
                  {"batch_size", c.model.train.batch_size},
                  {"grad_clip", c.model.train.grad_clip},
                  {"label_smoothing", c.model.train.label_smoothing},
                  {"min_accuracy", c.model.min_accuracy}};
    j["attribution"] = {{"steps", c.attribution.steps},
                        {"tau", c.attribution.tau},
                        {"baseline_mode", to_string(c.attribution.baseline_mode)},
                        {"riemann_coeff", to_string(c.attribution.coeff)},
                        {"zero_baseline_control", c.attribution.zero_baseline_control}};
    j["dkn"] = {{"t_low", c.dkn.t_low}, {"t_high", c.dkn.t_high}, {"t_percent", c.t_percent}};
    j["evaluation"] = {{"split_ratio", c.evaluation.split_ratio},
                       {"enhance_factor", c.evaluation.edit.enhance_factor},
                       {"drop_unmastered", c.evaluation.edit.exclusion.drop_unmastered},
                       {"exclude_top_fraction", c.evaluation.edit.exclusion.top_fraction},
                       {"lambda", c.evaluation.lambda ? nlohmann::json(*c.evaluation.lambda) : nlohmann::json(nullptr)}};
    j["output_dir"] = c.output_dir;
    return j;
}

/// Missing keys keep their defaults; unknown keys are errors.
inline RunConfig run_config_from_json(const nlohmann::json& j) {
    using detail::check_keys;
    using detail::read_opt;
    RunConfig c;
    check_keys(j, "config", {"schema_version", "seed", "corpus", "model", "attribution", "dkn", "evaluation", "output_dir"});
    if (!j.contains("schema_version")) throw ConfigError("config lacks schema_version");
    read_opt(j, "schema_version", c.schema_version, "config");
    read_opt(j, "seed", c.seed, "config");
    read_opt(j, "output_dir", c.output_dir, "config");
    if (j.contains("corpus")) {
        const auto& s = j["corpus"];
        check_keys(s, "corpus", {"relations", "facts_per_relation", "languages"});
        read_opt(s, "relations", c.corpus.relations, "corpus");
        read_opt(s, "facts_per_relation", c.corpus.facts_per_relation, "corpus");
        read_opt(s, "languages", c.corpus.languages, "corpus");
    }
    if (j.contains("model")) {
        const auto& s = j["model"];
        check_keys(s, "model",
                   {"architectures", "layers", "dim", "heads", "ffn_dim", "max_seq_len", "dropout", "epochs", "lr",
                    "batch_size", "grad_clip", "label_smoothing", "min_accuracy"});
        if (s.contains("architectures")) {
            c.model.architectures.clear();
            for (const auto& a : s["architectures"]) c.model.architectures.push_back(parse_architecture(a.get<std::string>()));
        }
        read_opt(s, "layers", c.model.layers, "model");
        read_opt(s, "dim", c.model.dim, "model");
        read_opt(s, "heads", c.model.heads, "model");
        read_opt(s, "ffn_dim", c.model.ffn_dim, "model");
        read_opt(s, "max_seq_len", c.model.max_seq_len, "model");
        read_opt(s, "dropout", c.model.dropout, "model");
        read_opt(s, "epochs", c.model.train.epochs, "model");
        read_opt(s, "lr", c.model.train.learning_rate, "model");
        read_opt(s, "batch_size", c.model.train.batch_size, "model");
        read_opt(s, "grad_clip", c.model.train.grad_clip, "model");
        read_opt(s, "label_smoothing", c.model.train.label_smoothing, "model");
        read_opt(s, "min_accuracy", c.model.min_accuracy, "model");
    }
    if (j.contains("attribution")) {
        const auto& s = j["attribution"];
        check_keys(s, "attribution", {"steps", "tau", "baseline_mode", "riemann_coeff", "zero_baseline_control"});
        read_opt(s, "steps", c.attribution.steps, "attribution");
        read_opt(s, "tau", c.attribution.tau, "attribution");
        if (s.contains("baseline_mode")) c.attribution.baseline_mode = parse_baseline_mode(s["baseline_mode"].get<std::string>());
        if (s.contains("riemann_coeff")) c.attribution.coeff = parse_riemann_coeff(s["riemann_coeff"].get<std::string>());
        read_opt(s, "zero_baseline_control", c.attribution.zero_baseline_control, "attribution");
    }
    if (j.contains("dkn")) {
        const auto& s = j["dkn"];
        check_keys(s, "dkn", {"t_low", "t_high", "t_percent"});
        read_opt(s, "t_low", c.dkn.t_low, "dkn");
        read_opt(s, "t_high", c.dkn.t_high, "dkn");
        read_opt(s, "t_percent", c.t_percent, "dkn");
    }
    if (j.contains("evaluation")) {
        const auto& s = j["evaluation"];
        check_keys(s, "evaluation", {"split_ratio", "enhance_factor", "drop_unmastered", "exclude_top_fraction", "lambda"});
        read_opt(s, "split_ratio", c.evaluation.split_ratio, "evaluation");
        read_opt(s, "enhance_factor", c.evaluation.edit.enhance_factor, "evaluation");
        read_opt(s, "drop_unmastered", c.evaluation.edit.exclusion.drop_unmastered, "evaluation");
        read_opt(s, "exclude_top_fraction", c.evaluation.edit.exclusion.top_fraction, "evaluation");
        if (s.contains("lambda") && !s["lambda"].is_null()) c.evaluation.lambda = s["lambda"].get<double>();
    }
    return c;
}

inline std::string RunConfig::hash() const {
    auto j = to_json(*this);
    j.erase("output_dir");
    return hex64(fnv1a64(j.dump()));
}

inline RunConfig load_run_config(const std::string& path) {
    nlohmann::json j;
    try {
        j = read_json(path);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(path + ": " + e.what());
    }
    return run_config_from_json(j);
}

/// Defaults with tau = 0.2 for each of `languages` languages.
inline RunConfig default_run_config(int languages = 2) {
    RunConfig c;
    c.corpus.languages = languages;
    for (const auto& l : c.language_ids()) c.attribution.tau[l] = 0.2;
    return c;
}

} // namespace knlab
