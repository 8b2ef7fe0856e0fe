#pragma once

// Synthetic multilingual fact corpus: template languages with disjoint
// vocabularies, cloze rendering for both architectures, wrong-fact
// augmentation and per-relation splits.

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "knlab/core.hpp"

namespace knlab {

inline constexpr std::string_view kPadToken = "<pad>";
inline constexpr std::string_view kMaskToken = "<mask>";
inline constexpr std::string_view kEosToken = "<eos>";
inline constexpr std::string_view kHeadSlot = "HEAD";
inline constexpr std::string_view kBlankSlot = "BLANK";

struct FactTriple {
    std::string id;
    std::string head;
    std::string relation;
    std::string tail;
};

/// One synthetic language. Templates are token patterns holding exactly one
/// HEAD and one BLANK slot. The lexicon maps entity symbols to surface tokens;
/// symbols absent from it render as the single token "<lang>:<symbol>".
struct LanguageSpec {
    std::string lang_id;
    std::map<std::string, std::vector<std::string>> templates;
    std::map<std::string, std::vector<std::string>> lexicon;

    std::vector<std::string> surface(const std::string& symbol) const {
        if (auto it = lexicon.find(symbol); it != lexicon.end()) return it->second;
        return {lang_id + ":" + symbol};
    }
};

/// Token table shared by every language of a corpus. Ids 0..2 are the
/// special tokens; the rest follow insertion order.
class Vocabulary {
public:
    Vocabulary() {
        add(std::string(kPadToken));
        add(std::string(kMaskToken));
        add(std::string(kEosToken));
    }

    int add(const std::string& token) {
        if (auto it = ids_.find(token); it != ids_.end()) return it->second;
        const int id = static_cast<int>(tokens_.size());
        tokens_.push_back(token);
        ids_.emplace(token, id);
        return id;
    }

    int id(const std::string& token) const {
        auto it = ids_.find(token);
        if (it == ids_.end()) throw PreconditionError("token '" + token + "' not in vocabulary");
        return it->second;
    }

    bool contains(const std::string& token) const { return ids_.count(token) != 0; }
    const std::string& token(int id) const { return tokens_.at(static_cast<std::size_t>(id)); }
    int size() const { return static_cast<int>(tokens_.size()); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    int pad_id() const { return 0; }
    int mask_id() const { return 1; }
    int eos_id() const { return 2; }
    static bool is_special(int id) { return id < 3; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> ids_;
};

/// Fill-in-the-blank prompt. For auto-encoding queries `blank_position` holds
/// the mask token; auto-regressive queries stop right before the answer and
/// `blank_position` is the final index, whose output predicts the answer.
struct ClozeQuery {
    std::string id;
    std::string fact_id;
    std::string relation;
    std::string lang_id;
    Architecture architecture = Architecture::auto_encoding;
    std::vector<int> tokens;
    int blank_position = 0;
    int gold_token = 0;
};

struct WrongFact {
    std::string fact_id;
    std::string lang_id;
    int wrong_token = 0;
    std::string provenance;
};

struct Corpus {
    std::vector<FactTriple> facts;
    std::vector<LanguageSpec> languages;
    Vocabulary vocab;
    std::vector<ClozeQuery> queries;
    std::vector<WrongFact> wrong_facts;

    const FactTriple& fact(const std::string& fact_id) const {
        for (const auto& f : facts)
            if (f.id == fact_id) return f;
        throw PreconditionError("unknown fact id '" + fact_id + "'");
    }

    const LanguageSpec& language(const std::string& lang_id) const {
        for (const auto& l : languages)
            if (l.lang_id == lang_id) return l;
        throw PreconditionError("unknown language '" + lang_id + "'");
    }

    std::vector<ClozeQuery> queries_for(Architecture arch) const {
        std::vector<ClozeQuery> out;
        for (const auto& q : queries)
            if (q.architecture == arch) out.push_back(q);
        return out;
    }

    std::vector<std::string> lang_ids() const {
        std::vector<std::string> out;
        for (const auto& l : languages) out.push_back(l.lang_id);
        return out;
    }
};

inline std::string query_id(const std::string& fact_id, const std::string& lang, Architecture arch) {
    return fact_id + "/" + lang + "/" + std::string(to_string(arch));
}

/// Four-slot templates [a, HEAD, b, BLANK]; odd-numbered languages move the
/// head to the front so word order differs across languages.
inline LanguageSpec make_synthetic_language(const std::string& lang_id, int n_relations, int variant) {
    LanguageSpec spec;
    spec.lang_id = lang_id;
    for (int r = 0; r < n_relations; ++r) {
        const std::string rel = "R" + std::to_string(r);
        const std::string a = lang_id + ":r" + std::to_string(r) + "a";
        const std::string b = lang_id + ":r" + std::to_string(r) + "b";
        if (variant % 2 == 0)
            spec.templates[rel] = {a, std::string(kHeadSlot), b, std::string(kBlankSlot)};
        else
            spec.templates[rel] = {std::string(kHeadSlot), a, b, std::string(kBlankSlot)};
    }
    return spec;
}

inline std::vector<LanguageSpec> make_synthetic_languages(int n_languages, int n_relations) {
    std::vector<LanguageSpec> out;
    for (int k = 0; k < n_languages; ++k)
        out.push_back(make_synthetic_language("L" + std::to_string(k + 1), n_relations, k));
    return out;
}

namespace detail {

inline const std::vector<std::string>& template_for(const LanguageSpec& lang, const std::string& relation) {
    auto it = lang.templates.find(relation);
    if (it == lang.templates.end())
        throw ConfigError("language '" + lang.lang_id + "' has no template for relation '" + relation + "'");
    return it->second;
}

inline void register_tokens(Vocabulary& vocab, const LanguageSpec& lang, const FactTriple& f) {
    for (const auto& tok : template_for(lang, f.relation)) {
        if (tok == kHeadSlot) {
            for (const auto& h : lang.surface(f.head)) vocab.add(h);
        } else if (tok == kBlankSlot) {
            for (const auto& t : lang.surface(f.tail)) vocab.add(t);
        } else {
            vocab.add(tok);
        }
    }
}

} // namespace detail

inline ClozeQuery render_cloze(const FactTriple& fact, const LanguageSpec& lang, Architecture arch,
                               const Vocabulary& vocab) {
    const auto& pattern = detail::template_for(lang, fact.relation);
    const auto tail = lang.surface(fact.tail);
    if (tail.size() != 1)
        throw PreconditionError("fact '" + fact.id + "' tail renders to " + std::to_string(tail.size()) +
                                " tokens in language '" + lang.lang_id + "'; single-token answers only");

    ClozeQuery q;
    q.id = query_id(fact.id, lang.lang_id, arch);
    q.fact_id = fact.id;
    q.relation = fact.relation;
    q.lang_id = lang.lang_id;
    q.architecture = arch;
    q.gold_token = vocab.id(tail.front());

    int blanks = 0;
    for (const auto& tok : pattern) {
        if (tok == kHeadSlot) {
            for (const auto& h : lang.surface(fact.head)) q.tokens.push_back(vocab.id(h));
        } else if (tok == kBlankSlot) {
            ++blanks;
            if (arch == Architecture::auto_regressive) break;
            q.blank_position = static_cast<int>(q.tokens.size());
            q.tokens.push_back(vocab.mask_id());
        } else {
            q.tokens.push_back(vocab.id(tok));
        }
    }
    if (blanks != 1)
        throw ConfigError("template for relation '" + fact.relation + "' in language '" + lang.lang_id +
                          "' must contain exactly one BLANK");
    if (arch == Architecture::auto_regressive) {
        if (q.tokens.empty())
            throw ConfigError("auto-regressive rendering of '" + fact.id + "' has an empty prefix");
        q.blank_position = static_cast<int>(q.tokens.size()) - 1;
    }
    return q;
}

/// Replaces the blank with `candidate`, giving the full statement. For the
/// auto-regressive form the candidate is appended. Returns the statement and
/// the position at which the candidate sits.
inline std::pair<std::vector<int>, int> fill_statement(const ClozeQuery& q, int candidate) {
    auto tokens = q.tokens;
    if (q.architecture == Architecture::auto_encoding) {
        tokens[static_cast<std::size_t>(q.blank_position)] = candidate;
        return {tokens, q.blank_position};
    }
    tokens.push_back(candidate);
    return {tokens, static_cast<int>(tokens.size()) - 1};
}

/// Picks the tail of another fact with the same relation whose rendering
/// differs from the gold answer.
inline WrongFact sample_wrong_fact(const FactTriple& fact, const std::vector<FactTriple>& fact_set,
                                   const LanguageSpec& lang, const Vocabulary& vocab, std::uint64_t seed) {
    const int gold = vocab.id(lang.surface(fact.tail).front());
    std::vector<std::pair<int, std::string>> pool;
    std::set<int> seen;
    for (const auto& f : fact_set) {
        if (f.relation != fact.relation) continue;
        const auto surf = lang.surface(f.tail);
        if (surf.size() != 1) continue;
        const int tok = vocab.id(surf.front());
        if (tok == gold || !seen.insert(tok).second) continue;
        pool.emplace_back(tok, f.id);
    }
    if (pool.empty())
        throw PreconditionError("relation '" + fact.relation + "' has a single distinct tail; cannot sample a wrong fact for '" +
                                fact.id + "'");
    Rng rng(derive_seed(seed, "wrong:" + fact.id + ":" + lang.lang_id));
    const auto& pick = pool[rng.index(pool.size())];
    return WrongFact{fact.id, lang.lang_id, pick.first, pick.second};
}

/// Builds `n_relations` x `n_facts_per_relation` facts with unique heads and
/// relation-specific tails, renders each fact in every language for both
/// architectures and samples one wrong fact per (fact, language).
inline Corpus generate_corpus(int n_relations, int n_facts_per_relation, std::vector<LanguageSpec> languages,
                              std::uint64_t seed) {
    if (n_relations < 1) throw PreconditionError("generate_corpus needs at least one relation");
    if (n_facts_per_relation < 4)
        throw PreconditionError("generate_corpus needs >= 4 facts per relation for wrong-fact sampling and splits (got " +
                                std::to_string(n_facts_per_relation) + ")");
    if (languages.empty()) throw PreconditionError("generate_corpus needs at least one language");

    Corpus c;
    c.languages = std::move(languages);
    Rng rng(derive_seed(seed, "corpus"));

    std::vector<int> head_ids(static_cast<std::size_t>(n_relations * n_facts_per_relation));
    for (std::size_t i = 0; i < head_ids.size(); ++i) head_ids[i] = static_cast<int>(i);
    rng.shuffle(head_ids);

    for (int r = 0; r < n_relations; ++r) {
        const std::string rel = "R" + std::to_string(r);
        std::vector<int> tails(static_cast<std::size_t>(n_facts_per_relation));
        for (int i = 0; i < n_facts_per_relation; ++i) tails[static_cast<std::size_t>(i)] = i;
        rng.shuffle(tails);
        for (int i = 0; i < n_facts_per_relation; ++i) {
            FactTriple f;
            char buf[32];
            std::snprintf(buf, sizeof buf, "f%02d_%03d", r, i);
            f.id = buf;
            f.head = "e" + std::to_string(head_ids[static_cast<std::size_t>(r * n_facts_per_relation + i)]);
            f.relation = rel;
            f.tail = "t" + std::to_string(r) + "_" + std::to_string(tails[static_cast<std::size_t>(i)]);
            c.facts.push_back(std::move(f));
        }
    }

    for (const auto& lang : c.languages)
        for (const auto& f : c.facts) detail::register_tokens(c.vocab, lang, f);

    for (const auto& f : c.facts)
        for (const auto& lang : c.languages)
            for (auto arch : {Architecture::auto_encoding, Architecture::auto_regressive})
                c.queries.push_back(render_cloze(f, lang, arch, c.vocab));

    for (const auto& f : c.facts)
        for (const auto& lang : c.languages) c.wrong_facts.push_back(sample_wrong_fact(f, c.facts, lang, c.vocab, seed));
    return c;
}

struct SplitResult {
    std::vector<ClozeQuery> mining;
    std::vector<ClozeQuery> checking;
};

/// Per relation: floor(ratio * n) queries (at least one) go to the mining
/// part, the remainder to the checking part.
inline SplitResult split_by_relation(const std::vector<ClozeQuery>& queries, double ratio, std::uint64_t seed) {
    if (!(ratio > 0.0 && ratio < 1.0)) throw PreconditionError("split ratio must lie in (0, 1)");
    std::map<std::string, std::vector<std::size_t>> by_relation;
    for (std::size_t i = 0; i < queries.size(); ++i) by_relation[queries[i].relation].push_back(i);

    SplitResult out;
    for (auto& [rel, idx] : by_relation) {
        const auto n = idx.size();
        if (n < 2) throw PreconditionError("relation '" + rel + "' has fewer than 2 queries; cannot split");
        std::sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return queries[a].id < queries[b].id; });
        Rng rng(derive_seed(seed, "split:" + rel));
        rng.shuffle(idx);
        auto n_mining = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(n)));
        n_mining = std::clamp<std::size_t>(n_mining, 1, n - 1);
        for (std::size_t i = 0; i < n; ++i) (i < n_mining ? out.mining : out.checking).push_back(queries[idx[i]]);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Persistence (line-delimited JSON; field names documented in docs/schema.md)

inline nlohmann::json to_json(const ClozeQuery& q) {
    return {{"id", q.id},
            {"fact_id", q.fact_id},
            {"relation", q.relation},
            {"lang", q.lang_id},
            {"arch", std::string(to_string(q.architecture))},
            {"tokens", q.tokens},
            {"blank_position", q.blank_position},
            {"gold_token", q.gold_token}};
}

inline ClozeQuery query_from_json(const nlohmann::json& j) {
    ClozeQuery q;
    q.id = j.at("id").get<std::string>();
    q.fact_id = j.at("fact_id").get<std::string>();
    q.relation = j.at("relation").get<std::string>();
    q.lang_id = j.at("lang").get<std::string>();
    q.architecture = parse_architecture(j.at("arch").get<std::string>());
    q.tokens = j.at("tokens").get<std::vector<int>>();
    q.blank_position = j.at("blank_position").get<int>();
    q.gold_token = j.at("gold_token").get<int>();
    return q;
}

inline void write_lines(const std::string& path, const std::vector<nlohmann::json>& records) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    for (const auto& r : records) out << r.dump() << '\n';
}

inline std::vector<nlohmann::json> read_lines(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path + "'");
    std::vector<nlohmann::json> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(nlohmann::json::parse(line));
        } catch (const nlohmann::json::exception& e) {
            throw IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

inline void write_json(const std::string& path, const nlohmann::json& j) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("cannot write '" + path + "'");
    out << j.dump(2) << '\n';
}

inline nlohmann::json read_json(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot read '" + path + "'");
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::exception& e) {
        throw IoError(path + ": " + e.what());
    }
}

inline std::vector<ClozeQuery> read_queries(const std::string& path) {
    std::vector<ClozeQuery> out;
    for (const auto& j : read_lines(path)) out.push_back(query_from_json(j));
    return out;
}

inline void write_queries(const std::string& path, const std::vector<ClozeQuery>& queries) {
    std::vector<nlohmann::json> recs;
    for (const auto& q : queries) recs.push_back(to_json(q));
    write_lines(path, recs);
}

/// Writes facts.jsonl, queries.jsonl, wrong_facts.jsonl, vocab.json and
/// languages.json into `dir` (which must exist).
inline void save_corpus(const Corpus& c, const std::string& dir) {
    std::vector<nlohmann::json> facts;
    for (const auto& f : c.facts)
        for (const auto& lang : c.languages)
            facts.push_back({{"id", f.id},
                             {"head", f.head},
                             {"relation", f.relation},
                             {"tail", f.tail},
                             {"lang", lang.lang_id},
                             {"template_id", lang.lang_id + "/" + f.relation}});
    write_lines(dir + "/facts.jsonl", facts);
    write_queries(dir + "/queries.jsonl", c.queries);

    std::vector<nlohmann::json> wrong;
    for (const auto& w : c.wrong_facts)
        wrong.push_back({{"fact_id", w.fact_id}, {"lang", w.lang_id}, {"wrong_token", w.wrong_token}, {"provenance", w.provenance}});
    write_lines(dir + "/wrong_facts.jsonl", wrong);

    write_json(dir + "/vocab.json", {{"tokens", c.vocab.tokens()}});

    nlohmann::json langs = nlohmann::json::array();
    for (const auto& l : c.languages) langs.push_back({{"lang_id", l.lang_id}, {"templates", l.templates}, {"lexicon", l.lexicon}});
    write_json(dir + "/languages.json", langs);
}

inline Corpus load_corpus(const std::string& dir) {
    Corpus c;
    const auto vocab = read_json(dir + "/vocab.json").at("tokens").get<std::vector<std::string>>();
    for (std::size_t i = 0; i < vocab.size(); ++i) {
        if (c.vocab.add(vocab[i]) != static_cast<int>(i)) throw IoError(dir + "/vocab.json: special tokens out of order");
    }
    for (const auto& l : read_json(dir + "/languages.json")) {
        LanguageSpec spec;
        spec.lang_id = l.at("lang_id").get<std::string>();
        spec.templates = l.at("templates").get<std::map<std::string, std::vector<std::string>>>();
        spec.lexicon = l.at("lexicon").get<std::map<std::string, std::vector<std::string>>>();
        c.languages.push_back(std::move(spec));
    }
    std::set<std::string> seen;
    for (const auto& j : read_lines(dir + "/facts.jsonl")) {
        auto id = j.at("id").get<std::string>();
        if (!seen.insert(id).second) continue;
        c.facts.push_back({id, j.at("head").get<std::string>(), j.at("relation").get<std::string>(),
                           j.at("tail").get<std::string>()});
    }
    c.queries = read_queries(dir + "/queries.jsonl");
    for (const auto& j : read_lines(dir + "/wrong_facts.jsonl"))
        c.wrong_facts.push_back({j.at("fact_id").get<std::string>(), j.at("lang").get<std::string>(),
                                 j.at("wrong_token").get<int>(), j.at("provenance").get<std::string>()});
    return c;
}

} // namespace knlab
