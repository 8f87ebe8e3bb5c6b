#pragma once

// Knowledge pieces (random token sequences), their queries, and the training /
// evaluation datasets built by injecting them into mode corpora.

#include <algorithm>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "cascade/common.hpp"
#include "cascade/corpus.hpp"

namespace cascade {

struct KnowledgePiece {
    std::string mode_id;
    std::size_t index = 0;
    std::vector<TokenId> tokens;

    std::size_t size() const noexcept { return tokens.size(); }
};

// K pieces per mode; all pieces are pairwise distinct across every mode.
struct KnowledgeSet {
    std::vector<std::string> modes;
    std::vector<std::vector<KnowledgePiece>> pieces;  // [mode][index]

    std::size_t per_mode() const noexcept { return pieces.empty() ? 0 : pieces.front().size(); }

    std::size_t mode_index(const std::string& mode) const {
        auto it = std::find(modes.begin(), modes.end(), mode);
        if (it == modes.end()) throw std::out_of_range("unknown knowledge mode '" + mode + "'");
        return static_cast<std::size_t>(it - modes.begin());
    }

    const KnowledgePiece& at(const std::string& mode, std::size_t index) const {
        const auto& list = pieces.at(mode_index(mode));
        if (index >= list.size())
            throw std::out_of_range("knowledge index " + std::to_string(index) + " out of range");
        return list[index];
    }

    std::vector<const KnowledgePiece*> all() const {
        std::vector<const KnowledgePiece*> out;
        for (const auto& list : pieces)
            for (const auto& p : list) out.push_back(&p);
        return out;
    }
};

struct QuerySet {
    std::size_t query_len = 0;
    std::vector<std::vector<std::vector<TokenId>>> queries;  // [mode][index] -> prefix
};

// One knowledge occurrence: piece (knowledge_mode, knowledge_index) overwrites
// tokens [block * block_len + offset, ... + length).
struct InjectionRecord {
    std::size_t block = 0;
    std::size_t offset = 0;
    std::string knowledge_mode;
    std::size_t knowledge_index = 0;

    bool operator==(const InjectionRecord&) const = default;
};

struct TrainingDataset {
    std::vector<TokenId> tokens;
    std::size_t block_len = 0;
    std::string format_mode;               // "mixed" for merged datasets
    std::vector<std::string> block_modes;  // per-block format mode (merged datasets only)
    std::vector<InjectionRecord> records;

    std::size_t num_blocks() const noexcept { return block_len ? tokens.size() / block_len : 0; }
    std::size_t position(const InjectionRecord& r) const noexcept {
        return r.block * block_len + r.offset;
    }
};

struct EvalEntry {
    std::vector<TokenId> tokens;
    std::size_t knowledge_len = 0;
    std::size_t query_len = 0;
    std::string format_mode;
    std::string knowledge_mode;
    std::size_t knowledge_index = 0;
    bool holdout = false;

    bool cross_mode() const { return format_mode != knowledge_mode; }
    // First position whose token is scored (predicting k[query_len]).
    std::size_t scored_begin() const { return tokens.size() - knowledge_len + query_len; }
};

// Cross-mode injections: pieces `indices` of `source_knowledge_mode` each appear
// `n_occ_x` times in the dataset of `target_format_mode`.
struct RewriteEntry {
    std::string target_format_mode;
    std::string source_knowledge_mode;
    std::vector<std::size_t> indices;
    std::size_t n_occ_x = 0;
};

using RewritePlan = std::vector<RewriteEntry>;

// Every ordered pair of distinct modes, rewriting with the non-held-out half
// [0, K/2) of the source mode's pieces. Empty when n_occ_x == 0.
inline RewritePlan full_rewrite_plan(const std::vector<std::string>& modes, std::size_t K,
                                     std::size_t n_occ_x) {
    RewritePlan plan;
    if (n_occ_x == 0) return plan;
    std::vector<std::size_t> indices(K / 2);
    for (std::size_t i = 0; i < indices.size(); ++i) indices[i] = i;
    for (const auto& target : modes)
        for (const auto& source : modes)
            if (target != source) plan.push_back({target, source, indices, n_occ_x});
    return plan;
}

// ---------------------------------------------------------------------------
// Sampling
// ---------------------------------------------------------------------------

inline KnowledgeSet sample_knowledge(const VocabLayout& layout, const std::vector<std::string>& modes,
                                     std::size_t K, std::size_t L_min, std::size_t L_max, Rng& rng) {
    if (K == 0) throw std::invalid_argument("sample_knowledge: K must be positive");
    if (L_min < 1) throw std::invalid_argument("sample_knowledge: L_min must be at least 1");
    if (L_min > L_max) throw std::invalid_argument("sample_knowledge: L_min > L_max");
    if (modes.empty()) throw std::invalid_argument("sample_knowledge: no modes");

    const auto alphabet = layout.knowledge_range.size();
    const long double needed = static_cast<long double>(K) * modes.size();
    long double available = 0;
    for (std::size_t len = L_min; len <= L_max && available < needed; ++len)
        available += std::pow(static_cast<long double>(alphabet), static_cast<long double>(len));
    if (available < needed)
        throw std::invalid_argument("sample_knowledge: only " + std::to_string(static_cast<double>(available)) +
                                    " distinct sequences exist but " +
                                    std::to_string(static_cast<double>(needed)) + " are required");

    constexpr int max_attempts = 100000;
    KnowledgeSet ks;
    ks.modes = modes;
    std::set<std::vector<TokenId>> seen;
    for (const auto& mode : modes) {
        auto& list = ks.pieces.emplace_back();
        for (std::size_t i = 0; i < K; ++i) {
            std::vector<TokenId> seq;
            int attempt = 0;
            do {
                if (++attempt > max_attempts)
                    throw std::runtime_error("sample_knowledge: could not draw a distinct piece");
                const auto len = rng.between(L_min, L_max);
                seq.resize(len);
                for (auto& t : seq)
                    t = static_cast<TokenId>(rng.between(layout.knowledge_range.lo, layout.knowledge_range.hi));
            } while (seen.contains(seq));
            seen.insert(seq);
            list.push_back({mode, i, std::move(seq)});
        }
    }
    return ks;
}

// Smallest prefix length that maps every piece to a distinct query.
inline QuerySet compute_query_length(const KnowledgeSet& ks) {
    const auto pieces = ks.all();
    if (pieces.empty()) throw std::invalid_argument("compute_query_length: empty knowledge set");
    std::size_t min_len = pieces.front()->size();
    for (const auto* p : pieces) min_len = std::min(min_len, p->size());

    for (std::size_t l = 1; l <= min_len; ++l) {
        std::set<std::vector<TokenId>> prefixes;
        for (const auto* p : pieces) prefixes.emplace(p->tokens.begin(), p->tokens.begin() + l);
        if (prefixes.size() != pieces.size()) continue;
        QuerySet qs;
        qs.query_len = l;
        for (const auto& list : ks.pieces) {
            auto& out = qs.queries.emplace_back();
            for (const auto& p : list) out.emplace_back(p.tokens.begin(), p.tokens.begin() + l);
        }
        return qs;
    }
    throw std::invalid_argument(
        "compute_query_length: no prefix length up to " + std::to_string(min_len) +
        " separates all pieces (one piece is a prefix of another)");
}

// ---------------------------------------------------------------------------
// Dataset construction
// ---------------------------------------------------------------------------

inline TrainingDataset build_training_dataset(const ModeCorpus& corpus, const KnowledgeSet& ks,
                                              std::size_t n_occ, std::size_t block_len,
                                              const RewritePlan& plan, Rng& rng) {
    if (!corpus.is_split()) throw std::invalid_argument("build_training_dataset: corpus is not split");
    if (block_len == 0 || corpus.train_len % block_len != 0)
        throw std::invalid_argument("build_training_dataset: train split is not a whole number of blocks");

    const auto own_mode = ks.mode_index(corpus.mode_id);
    const auto K = ks.per_mode();
    const auto holdout_boundary = K / 2;

    struct Pending {
        const KnowledgePiece* piece;
    };
    std::vector<Pending> pending;
    for (const auto& p : ks.pieces[own_mode])
        for (std::size_t n = 0; n < n_occ; ++n) pending.push_back({&p});

    for (const auto& e : plan) {
        if (e.target_format_mode != corpus.mode_id) continue;
        if (e.source_knowledge_mode == corpus.mode_id)
            throw std::invalid_argument("rewrite plan: source mode equals target mode '" + corpus.mode_id + "'");
        for (auto idx : e.indices) {
            if (idx >= holdout_boundary)
                throw std::invalid_argument("rewrite plan references held-out piece " + e.source_knowledge_mode +
                                            "[" + std::to_string(idx) + "]");
            const auto& piece = ks.at(e.source_knowledge_mode, idx);
            for (std::size_t n = 0; n < e.n_occ_x; ++n) pending.push_back({&piece});
        }
    }

    TrainingDataset ds;
    ds.block_len = block_len;
    ds.format_mode = corpus.mode_id;
    ds.tokens.assign(corpus.tokens.begin(), corpus.tokens.begin() + static_cast<std::ptrdiff_t>(corpus.train_len));
    const auto n_blocks = ds.num_blocks();
    if (pending.size() > n_blocks)
        throw std::invalid_argument("build_training_dataset: " + std::to_string(pending.size()) +
                                    " injections need distinct blocks but only " + std::to_string(n_blocks) +
                                    " exist");

    // Partial Fisher-Yates: the first pending.size() entries are a uniform
    // sample of distinct blocks in random order.
    std::vector<std::size_t> blocks(n_blocks);
    for (std::size_t i = 0; i < n_blocks; ++i) blocks[i] = i;
    for (std::size_t i = 0; i < pending.size(); ++i) {
        const auto j = i + rng.below(n_blocks - i);
        std::swap(blocks[i], blocks[j]);
    }

    ds.records.reserve(pending.size());
    for (std::size_t i = 0; i < pending.size(); ++i) {
        const auto& piece = *pending[i].piece;
        if (piece.size() > block_len)
            throw std::invalid_argument("knowledge piece longer than block_len");
        const auto offset = rng.below(block_len - piece.size() + 1);
        const auto start = blocks[i] * block_len + offset;
        std::copy(piece.tokens.begin(), piece.tokens.end(), ds.tokens.begin() + static_cast<std::ptrdiff_t>(start));
        ds.records.push_back({blocks[i], offset, piece.mode_id, piece.index});
    }
    std::sort(ds.records.begin(), ds.records.end(),
              [](const auto& a, const auto& b) { return a.block < b.block; });
    return ds;
}

// Interleaves the blocks of several datasets in a random block order.
inline TrainingDataset merge_datasets(const std::vector<TrainingDataset>& parts, Rng& rng) {
    if (parts.empty()) throw std::invalid_argument("merge_datasets: nothing to merge");
    const auto block_len = parts.front().block_len;
    struct Src {
        std::size_t part, block;
    };
    std::vector<Src> order;
    for (std::size_t p = 0; p < parts.size(); ++p) {
        if (parts[p].block_len != block_len) throw std::invalid_argument("merge_datasets: block_len mismatch");
        for (std::size_t b = 0; b < parts[p].num_blocks(); ++b) order.push_back({p, b});
    }
    rng.shuffle(order.begin(), order.end());

    std::vector<std::map<std::size_t, std::size_t>> new_index(parts.size());
    TrainingDataset out;
    out.block_len = block_len;
    out.format_mode = parts.size() == 1 ? parts.front().format_mode : "mixed";
    out.tokens.reserve(order.size() * block_len);
    out.block_modes.reserve(order.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        const auto& src = parts[order[i].part];
        const auto begin = src.tokens.begin() + static_cast<std::ptrdiff_t>(order[i].block * block_len);
        out.tokens.insert(out.tokens.end(), begin, begin + static_cast<std::ptrdiff_t>(block_len));
        out.block_modes.push_back(src.format_mode);
        new_index[order[i].part][order[i].block] = i;
    }
    for (std::size_t p = 0; p < parts.size(); ++p)
        for (auto r : parts[p].records) {
            r.block = new_index[p].at(r.block);
            out.records.push_back(std::move(r));
        }
    std::sort(out.records.begin(), out.records.end(),
              [](const auto& a, const auto& b) { return a.block < b.block; });
    return out;
}

// For every (format corpus, piece): n_occ_test eval-split blocks, sampled with
// replacement, whose tail is overwritten by the piece.
inline std::vector<EvalEntry> build_eval_set(const std::vector<ModeCorpus>& corpora, const KnowledgeSet& ks,
                                             const QuerySet& qs, std::size_t n_occ_test, std::size_t block_len,
                                             Rng& rng, std::optional<std::size_t> holdout_boundary = {}) {
    const auto boundary = holdout_boundary.value_or(ks.per_mode() / 2);
    std::vector<EvalEntry> entries;
    for (const auto& corpus : corpora) {
        if (!corpus.is_split()) throw std::invalid_argument("build_eval_set: corpus is not split");
        const auto eval = corpus.eval();
        const auto n_blocks = eval.size() / block_len;
        if (n_blocks == 0)
            throw std::invalid_argument("build_eval_set: evaluation split of '" + corpus.mode_id +
                                        "' is shorter than one block");
        for (const auto& list : ks.pieces)
            for (const auto& piece : list) {
                if (piece.size() > block_len) throw std::invalid_argument("knowledge piece longer than block_len");
                for (std::size_t n = 0; n < n_occ_test; ++n) {
                    const auto b = rng.below(n_blocks);
                    EvalEntry e;
                    e.tokens.assign(eval.begin() + static_cast<std::ptrdiff_t>(b * block_len),
                                    eval.begin() + static_cast<std::ptrdiff_t>((b + 1) * block_len));
                    std::copy(piece.tokens.begin(), piece.tokens.end(),
                              e.tokens.end() - static_cast<std::ptrdiff_t>(piece.size()));
                    e.knowledge_len = piece.size();
                    e.query_len = qs.query_len;
                    e.format_mode = corpus.mode_id;
                    e.knowledge_mode = piece.mode_id;
                    e.knowledge_index = piece.index;
                    e.holdout = piece.index >= boundary;
                    entries.push_back(std::move(e));
                }
            }
    }
    return entries;
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

inline void to_json(json& j, const InjectionRecord& r) {
    j = json{{"block", r.block}, {"offset", r.offset}, {"kmode", r.knowledge_mode}, {"kindex", r.knowledge_index}};
}
inline void from_json(const json& j, InjectionRecord& r) {
    r.block = j.at("block").get<std::size_t>();
    r.offset = j.at("offset").get<std::size_t>();
    r.knowledge_mode = j.at("kmode").get<std::string>();
    r.knowledge_index = j.at("kindex").get<std::size_t>();
}

inline json knowledge_to_json(const KnowledgeSet& ks) {
    json arr = json::array();
    for (const auto* p : ks.all()) arr.push_back({{"mode", p->mode_id}, {"index", p->index}, {"tokens", p->tokens}});
    return arr;
}

inline KnowledgeSet knowledge_from_json(const json& arr) {
    KnowledgeSet ks;
    for (const auto& item : arr) {
        const auto mode = item.at("mode").get<std::string>();
        auto it = std::find(ks.modes.begin(), ks.modes.end(), mode);
        if (it == ks.modes.end()) {
            ks.modes.push_back(mode);
            ks.pieces.emplace_back();
            it = ks.modes.end() - 1;
        }
        auto& list = ks.pieces[static_cast<std::size_t>(it - ks.modes.begin())];
        const auto index = item.at("index").get<std::size_t>();
        if (index != list.size()) throw DataError("knowledge list is not in index order");
        list.push_back({mode, index, item.at("tokens").get<std::vector<TokenId>>()});
    }
    return ks;
}

struct DatasetFile {
    TrainingDataset dataset;
    KnowledgeSet knowledge;
    std::size_t query_len = 0;
};

inline std::filesystem::path manifest_path_for(const std::filesystem::path& tokens_path) {
    auto p = tokens_path;
    p.replace_extension(".manifest.json");
    return p;
}

inline void save_dataset(const std::filesystem::path& tokens_path, const TrainingDataset& ds,
                         const KnowledgeSet& ks, std::size_t query_len) {
    io::write_tokens(tokens_path, ds.tokens);
    json m{{"block_len", ds.block_len},
           {"format_mode", ds.format_mode},
           {"records", ds.records},
           {"knowledge", knowledge_to_json(ks)},
           {"query_len", query_len}};
    if (!ds.block_modes.empty()) m["block_modes"] = ds.block_modes;
    io::write_json(manifest_path_for(tokens_path), m);
}

// Accepts either the token file or its manifest.
inline DatasetFile load_dataset(std::filesystem::path path) {
    const auto name = path.filename().string();
    constexpr std::string_view suffix = ".manifest.json";
    if (name.size() > suffix.size() && name.ends_with(suffix)) {
        path.replace_filename(name.substr(0, name.size() - suffix.size()) + ".tokens");
    }
    const auto m = io::read_json(manifest_path_for(path));
    DatasetFile f;
    f.dataset.tokens = io::read_tokens(path);
    f.dataset.block_len = m.at("block_len").get<std::size_t>();
    f.dataset.format_mode = m.at("format_mode").get<std::string>();
    f.dataset.records = m.at("records").get<std::vector<InjectionRecord>>();
    if (m.contains("block_modes")) f.dataset.block_modes = m.at("block_modes").get<std::vector<std::string>>();
    f.knowledge = knowledge_from_json(m.at("knowledge"));
    f.query_len = m.at("query_len").get<std::size_t>();
    if (f.dataset.block_len == 0 || f.dataset.tokens.size() % f.dataset.block_len != 0)
        throw DataError(path.string() + ": token count is not a multiple of block_len");
    return f;
}

inline json eval_entry_to_json(const EvalEntry& e) {
    return json{{"tokens", e.tokens},       {"knowledge_len", e.knowledge_len},
                {"query_len", e.query_len}, {"format_mode", e.format_mode},
                {"knowledge_mode", e.knowledge_mode}, {"knowledge_index", e.knowledge_index},
                {"holdout", e.holdout}};
}

inline EvalEntry eval_entry_from_json(const json& j) {
    EvalEntry e;
    e.tokens = j.at("tokens").get<std::vector<TokenId>>();
    e.knowledge_len = j.at("knowledge_len").get<std::size_t>();
    e.query_len = j.at("query_len").get<std::size_t>();
    e.format_mode = j.at("format_mode").get<std::string>();
    e.knowledge_mode = j.at("knowledge_mode").get<std::string>();
    e.knowledge_index = j.value("knowledge_index", std::size_t{0});
    e.holdout = j.at("holdout").get<bool>();
    return e;
}

inline void save_eval_set(const std::filesystem::path& path, const std::vector<EvalEntry>& entries) {
    std::string out;
    for (const auto& e : entries) out += eval_entry_to_json(e).dump() + "\n";
    io::write_atomic(path, out);
}

inline std::vector<EvalEntry> load_eval_set(const std::filesystem::path& path) {
    std::vector<EvalEntry> entries;
    std::istringstream in(io::read_text(path));
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            entries.push_back(eval_entry_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw DataError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return entries;
}

}  // namespace cascade
