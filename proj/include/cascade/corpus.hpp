#pragma once

// Synthetic mode corpora and raw token corpus loading.

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "cascade/common.hpp"

namespace cascade {

// A token stream in one mode (format). The prefix [0, train_len) is the
// training split and [train_len, size) the evaluation split. train_len == 0
// means the corpus has not been split yet.
struct ModeCorpus {
    std::string mode_id;
    std::vector<TokenId> tokens;
    std::size_t train_len = 0;

    std::size_t size() const noexcept { return tokens.size(); }
    bool is_split() const noexcept { return train_len > 0; }
    std::span<const TokenId> train() const { return {tokens.data(), train_len}; }
    std::span<const TokenId> eval() const {
        return {tokens.data() + train_len, tokens.size() - train_len};
    }
};

// Generator for a synthetic mode. Each token is drawn with probability `bias`
// uniformly from `preferred`, otherwise uniformly from the whole format range.
struct MarkovModeSpec {
    std::string mode_id;
    TokenRange preferred{0, 59};
    double bias = 0.9;
    std::uint64_t seed = 0;
};

inline void to_json(json& j, const MarkovModeSpec& s) {
    j = json{{"id", s.mode_id}, {"preferred", s.preferred}, {"bias", s.bias}, {"seed", s.seed}};
}
inline void from_json(const json& j, MarkovModeSpec& s) {
    s.mode_id = j.at("id").get<std::string>();
    s.preferred = j.at("preferred").get<TokenRange>();
    s.bias = j.value("bias", 0.9);
    s.seed = j.value("seed", std::uint64_t{0});
}

inline ModeCorpus synth_mode(const MarkovModeSpec& spec, std::size_t n_tokens,
                             const VocabLayout& layout) {
    if (n_tokens == 0) throw std::invalid_argument("synth_mode: n_tokens must be positive");
    if (layout.format_range.lo > layout.format_range.hi)
        throw std::invalid_argument("synth_mode: empty format range");
    if (!(spec.bias >= 0.0 && spec.bias <= 1.0))
        throw std::invalid_argument("synth_mode: bias must lie in [0, 1]");
    if (spec.preferred.lo > spec.preferred.hi || !layout.format_range.contains(spec.preferred))
        throw std::invalid_argument("synth_mode: preferred interval must lie inside the format range");

    Rng rng(spec.seed);
    ModeCorpus corpus{spec.mode_id, {}, 0};
    corpus.tokens.resize(n_tokens);
    const auto& fmt = layout.format_range;
    for (auto& t : corpus.tokens) {
        if (rng.uniform() < spec.bias)
            t = static_cast<TokenId>(rng.between(spec.preferred.lo, spec.preferred.hi));
        else
            t = static_cast<TokenId>(rng.between(fmt.lo, fmt.hi));
    }
    return corpus;
}

inline ModeCorpus load_corpus(const std::filesystem::path& path, const VocabLayout& layout,
                              std::string mode_id) {
    auto tokens = io::read_tokens(path);
    if (tokens.empty()) throw DataError(path.string() + ": empty corpus file");
    for (std::size_t i = 0; i < tokens.size(); ++i) {
        if (!layout.format_range.contains(tokens[i]))
            throw DataError(path.string() + ": token " + std::to_string(tokens[i]) + " at index " +
                            std::to_string(i) + " lies outside the format range");
    }
    return {std::move(mode_id), std::move(tokens), 0};
}

// Sets train_len to the largest multiple of block_len not exceeding
// fraction * size. Both fraction * size and (1 - fraction) * size must cover at
// least one full block.
inline ModeCorpus split_corpus(ModeCorpus corpus, double train_fraction, std::size_t block_len) {
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw std::invalid_argument("split_corpus: fraction must lie in (0, 1)");
    if (block_len == 0) throw std::invalid_argument("split_corpus: block_len must be positive");
    const auto n = corpus.size();
    const auto blocks = static_cast<std::size_t>(
        std::floor(train_fraction * static_cast<double>(n) / static_cast<double>(block_len)));
    const auto train_len = blocks * block_len;
    if (train_len == 0)
        throw std::invalid_argument("split_corpus: training split has no full block");
    // The requested evaluation share must itself hold a full block, even though
    // rounding the training side down leaves the remainder to evaluation.
    const auto eval_share = (1.0 - train_fraction) * static_cast<double>(n);
    if (n - train_len < block_len || eval_share + 1e-6 < static_cast<double>(block_len))
        throw std::invalid_argument("split_corpus: evaluation split has no full block");
    corpus.train_len = train_len;
    return corpus;
}

inline json corpus_manifest(const ModeCorpus& c, const VocabLayout& layout) {
    return json{{"mode_id", c.mode_id},
                {"n_tokens", c.size()},
                {"train_len", c.train_len},
                {"layout", layout}};
}

inline void save_corpus(const std::filesystem::path& tokens_path, const ModeCorpus& c,
                        const VocabLayout& layout) {
    io::write_tokens(tokens_path, c.tokens);
    auto manifest_path = tokens_path;
    manifest_path.replace_extension(".json");
    io::write_json(manifest_path, corpus_manifest(c, layout));
}

}  // namespace cascade
