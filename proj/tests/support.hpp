#pragma once

#include <knlab/corpus.hpp>
#include <knlab/model.hpp>

namespace knlab::testing {

inline Corpus tiny_corpus(int n_languages = 2, std::uint64_t seed = 7) {
    return generate_corpus(2, 4, make_synthetic_languages(n_languages, 2), seed);
}

inline ModelConfig tiny_config(Architecture arch, int vocab_size, std::uint64_t seed = 11) {
    ModelConfig c;
    c.architecture = arch;
    c.n_layers = 2;
    c.model_dim = 16;
    c.n_heads = 2;
    c.ffn_dim = 32;
    c.vocab_size = vocab_size;
    c.max_seq_len = 8;
    c.seed = seed;
    c.dropout = 0.0;
    return c;
}

/// A small model trained until it masters the tiny corpus; cached per arch.
inline const Model& tiny_trained(Architecture arch) {
    static std::map<Architecture, Model> cache;
    auto it = cache.find(arch);
    if (it != cache.end()) return it->second;
    const auto corpus = tiny_corpus();
    auto cfg = tiny_config(arch, corpus.vocab.size());
    cfg.model_dim = 32;
    cfg.ffn_dim = 64;
    cfg.dropout = 0.05;
    TrainOptions opt;
    opt.epochs = 150;
    opt.learning_rate = 3e-3;
    return cache.emplace(arch, train(corpus.queries_for(arch), cfg, opt)).first->second;
}

inline double relative_error(double a, double b) {
    const double scale = std::max(std::abs(a), std::abs(b));
    if (scale < 1e-12) return 0.0;
    return std::abs(a - b) / scale;
}

} // namespace knlab::testing
