#pragma once

// Experiment configuration and the data -> train -> evaluate pipeline shared by
// the command-line tool, the ratio sweep and the acceptance suite.

#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "cascade/common.hpp"
#include "cascade/corpus.hpp"
#include "cascade/ensemble.hpp"
#include "cascade/knowledge.hpp"
#include "cascade/metrics.hpp"
#include "cascade/model.hpp"
#include "cascade/trainer.hpp"
#include "cascade/windows.hpp"

namespace cascade {

// Seeds used for training in the reference runs.
inline const std::vector<std::uint64_t> paper5_seeds{42, 142857, 2225393, 20000308, 2018011309};

inline std::vector<std::uint64_t> named_seed_set(const std::string& name) {
    if (name == "paper5") return paper5_seeds;
    throw ConfigError("seeds", "unknown seed set '" + name + "'");
}

struct KnowledgeParams {
    std::size_t K = 8;
    std::size_t L_min = 8;
    std::size_t L_max = 32;
    std::size_t n_occ = 256;
    std::size_t n_occ_test = 16;
};

struct ExperimentConfig {
    VocabLayout layout;
    std::vector<MarkovModeSpec> modes{{"A", {0, 59}, 0.9, 0}, {"B", {60, 119}, 0.9, 0}};
    std::size_t corpus_tokens = 221184;  // per mode
    double train_fraction = 0.9;
    KnowledgeParams knowledge;
    std::size_t block_len = 64;  // L_blk = 2^M
    unsigned m_min = 3;
    ModelConfig model;
    TrainConfig train;
    std::size_t n_occ_x = 0;  // cross-mode occurrences per non-held-out piece, every mode pair
    std::string out_dir = "runs/default";
    std::uint64_t seed = 42;  // dataset seed

    CascadeSpec cascade() const { return CascadeSpec::for_block_len(block_len, m_min); }

    std::vector<std::string> mode_ids() const {
        std::vector<std::string> out;
        for (const auto& m : modes) out.push_back(m.mode_id);
        return out;
    }

    void validate() const {
        layout.validate();
        if (modes.empty()) throw ConfigError("modes", "at least one mode is required");
        for (std::size_t i = 0; i < modes.size(); ++i) {
            const auto field = "modes[" + std::to_string(i) + "]";
            if (modes[i].mode_id.empty() || modes[i].mode_id == "mixed")
                throw ConfigError(field + ".id", "invalid mode id");
            if (modes[i].mode_id.find_first_of(",\n\"") != std::string::npos)
                throw ConfigError(field + ".id", "must not contain commas, quotes or newlines");
            for (std::size_t j = 0; j < i; ++j)
                if (modes[j].mode_id == modes[i].mode_id) throw ConfigError(field + ".id", "duplicate mode id");
            if (!layout.format_range.contains(modes[i].preferred))
                throw ConfigError(field + ".preferred", "must lie inside the format range");
            if (!(modes[i].bias >= 0.0 && modes[i].bias <= 1.0))
                throw ConfigError(field + ".bias", "must lie in [0, 1]");
        }
        if (!is_power_of_two(block_len) || block_len < 8)
            throw ConfigError("L_blk", "must be a power of two and at least 8");
        if (m_min < 3 || (std::size_t{1} << m_min) > block_len)
            throw ConfigError("cascade.m_min", "must satisfy 3 <= m_min <= log2(L_blk)");
        const auto& k = knowledge;
        if (k.K < 2) throw ConfigError("knowledge.K", "must be at least 2");
        if (k.L_min < 2 || k.L_min > k.L_max) throw ConfigError("knowledge.L_min", "must satisfy 2 <= L_min <= L_max");
        if (2 * k.L_max > block_len) throw ConfigError("knowledge.L_max", "2 * L_max must not exceed L_blk");
        if (k.n_occ_test < 1) throw ConfigError("knowledge.N_occ_test", "must be at least 1");
        if (!(train_fraction > 0.0 && train_fraction < 1.0))
            throw ConfigError("corpus.train_fraction", "must lie in (0, 1)");
        if (corpus_tokens < 2 * block_len) throw ConfigError("corpus.n_tokens", "too small for two blocks");
        model.validate();
        if (model.vocab_size != layout.vocab_size)
            throw ConfigError("model.vocab_size", "must equal layout.vocab_size");
        if (model.max_seq_len < block_len) throw ConfigError("model.max_seq_len", "must be at least L_blk");
        train.validate();
    }
};

inline json knowledge_params_json(const KnowledgeParams& k) {
    return json{{"K", k.K}, {"L_min", k.L_min}, {"L_max", k.L_max}, {"N_occ", k.n_occ}, {"N_occ_test", k.n_occ_test}};
}

inline void to_json(json& j, const ExperimentConfig& c) {
    j = json{{"layout", c.layout},
             {"modes", c.modes},
             {"corpus", {{"n_tokens", c.corpus_tokens}, {"train_fraction", c.train_fraction}}},
             {"knowledge", knowledge_params_json(c.knowledge)},
             {"L_blk", c.block_len},
             {"cascade", {{"m_min", c.m_min}}},
             {"model", c.model},
             {"train", c.train},
             {"rewrite", {{"n_occ_x", c.n_occ_x}}},
             {"out_dir", c.out_dir},
             {"seed", c.seed}};
}

namespace detail {

// Reads an optional field, reporting type errors with the field path.
template <typename T>
void read_field(const json& j, const char* key, T& dst, const std::string& path) {
    if (!j.contains(key)) return;
    try {
        dst = j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw ConfigError(path + key, e.what());
    } catch (const std::invalid_argument& e) {
        throw ConfigError(path + key, e.what());
    }
}

}  // namespace detail

inline ExperimentConfig experiment_from_json(const json& j) {
    static const std::set<std::string> known{"layout", "modes", "corpus", "knowledge", "L_blk", "cascade",
                                             "model",  "train", "rewrite", "out_dir",  "seed"};
    if (!j.is_object()) throw ConfigError("<root>", "config must be a JSON object");
    for (const auto& [key, _] : j.items())
        if (!known.contains(key)) throw ConfigError(key, "unknown field");
    ExperimentConfig c;
    using detail::read_field;
    read_field(j, "layout", c.layout, "");
    if (j.contains("layout")) c.model.vocab_size = c.layout.vocab_size;
    read_field(j, "modes", c.modes, "");
    if (j.contains("corpus")) {
        const auto& s = j.at("corpus");
        read_field(s, "n_tokens", c.corpus_tokens, "corpus.");
        read_field(s, "train_fraction", c.train_fraction, "corpus.");
    }
    if (j.contains("knowledge")) {
        const auto& s = j.at("knowledge");
        read_field(s, "K", c.knowledge.K, "knowledge.");
        read_field(s, "L_min", c.knowledge.L_min, "knowledge.");
        read_field(s, "L_max", c.knowledge.L_max, "knowledge.");
        read_field(s, "N_occ", c.knowledge.n_occ, "knowledge.");
        read_field(s, "N_occ_test", c.knowledge.n_occ_test, "knowledge.");
    }
    read_field(j, "L_blk", c.block_len, "");
    if (j.contains("cascade")) read_field(j.at("cascade"), "m_min", c.m_min, "cascade.");
    if (j.contains("model")) {
        json merged = c.model;
        merged.update(j.at("model"));
        read_field(json{{"model", merged}}, "model", c.model, "");
    }
    if (j.contains("train")) {
        json merged = c.train;
        merged.update(j.at("train"));
        try {
            c.train = merged.get<TrainConfig>();
        } catch (const json::exception& e) {
            throw ConfigError("train", e.what());
        }
    }
    if (j.contains("rewrite")) read_field(j.at("rewrite"), "n_occ_x", c.n_occ_x, "rewrite.");
    read_field(j, "out_dir", c.out_dir, "");
    read_field(j, "seed", c.seed, "");
    return c;
}

// Sets a dotted path ("train.lr_max") in a JSON document. The value is parsed
// as JSON when possible and taken as a string otherwise.
inline void apply_override(json& doc, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0) throw ConfigError(assignment, "override must look like key.path=value");
    const auto path = assignment.substr(0, eq);
    const auto text = assignment.substr(eq + 1);
    json value;
    try {
        value = json::parse(text);
    } catch (const json::parse_error&) {
        value = text;
    }
    json* node = &doc;
    std::size_t start = 0;
    while (true) {
        const auto dot = path.find('.', start);
        const auto key = path.substr(start, dot == std::string::npos ? std::string::npos : dot - start);
        if (key.empty()) throw ConfigError(path, "empty path component");
        if (dot == std::string::npos) {
            (*node)[key] = value;
            break;
        }
        if (!node->contains(key) || !(*node)[key].is_object()) (*node)[key] = json::object();
        node = &(*node)[key];
        start = dot + 1;
    }
}

inline ExperimentConfig load_experiment(const std::filesystem::path& path, const std::vector<std::string>& overrides = {}) {
    json doc;
    try {
        doc = json::parse(io::read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("<file>", path.string() + ": " + e.what());
    }
    for (const auto& o : overrides) apply_override(doc, o);
    auto cfg = experiment_from_json(doc);
    cfg.validate();
    return cfg;
}

// ---------------------------------------------------------------------------
// Data generation
// ---------------------------------------------------------------------------

struct GeneratedData {
    std::vector<ModeCorpus> corpora;
    KnowledgeSet knowledge;
    QuerySet queries;
    std::vector<TrainingDataset> per_mode;
    TrainingDataset train;  // per-mode datasets merged at block level
    std::vector<EvalEntry> eval;
};

inline GeneratedData generate(const ExperimentConfig& cfg) {
    cfg.validate();
    GeneratedData g;
    for (std::size_t i = 0; i < cfg.modes.size(); ++i) {
        auto spec = cfg.modes[i];
        spec.seed = derive_seed(cfg.seed, "corpus", i);
        g.corpora.push_back(
            split_corpus(synth_mode(spec, cfg.corpus_tokens, cfg.layout), cfg.train_fraction, cfg.block_len));
    }
    const auto ids = cfg.mode_ids();
    Rng krng(derive_seed(cfg.seed, "knowledge"));
    g.knowledge = sample_knowledge(cfg.layout, ids, cfg.knowledge.K, cfg.knowledge.L_min, cfg.knowledge.L_max, krng);
    g.queries = compute_query_length(g.knowledge);
    const auto plan = full_rewrite_plan(ids, cfg.knowledge.K, cfg.n_occ_x);
    for (std::size_t i = 0; i < g.corpora.size(); ++i) {
        Rng irng(derive_seed(cfg.seed, "inject", i));
        g.per_mode.push_back(
            build_training_dataset(g.corpora[i], g.knowledge, cfg.knowledge.n_occ, cfg.block_len, plan, irng));
    }
    Rng mrng(derive_seed(cfg.seed, "merge"));
    g.train = merge_datasets(g.per_mode, mrng);
    Rng erng(derive_seed(cfg.seed, "eval"));
    g.eval = build_eval_set(g.corpora, g.knowledge, g.queries, cfg.knowledge.n_occ_test, cfg.block_len, erng);
    return g;
}

inline std::vector<KnowledgeSpan> knowledge_spans(const TrainingDataset& ds, const KnowledgeSet& ks) {
    std::vector<KnowledgeSpan> spans;
    spans.reserve(ds.records.size());
    for (const auto& r : ds.records)
        spans.push_back({ds.position(r), ks.at(r.knowledge_mode, r.knowledge_index).size()});
    return spans;
}

inline void write_config(const std::filesystem::path& dir, const ExperimentConfig& cfg) {
    io::write_json(dir / "config.json", json(cfg));
}

inline void save_generated(const std::filesystem::path& dir, const ExperimentConfig& cfg, const GeneratedData& g) {
    std::filesystem::create_directories(dir);
    write_config(dir, cfg);
    for (const auto& c : g.corpora) save_corpus(dir / ("corpus_" + c.mode_id + ".tokens"), c, cfg.layout);
    io::write_json(dir / "knowledge.json", json{{"query_len", g.queries.query_len},
                                                {"pieces", knowledge_to_json(g.knowledge)}});
    save_dataset(dir / "train.tokens", g.train, g.knowledge, g.queries.query_len);
    save_eval_set(dir / "eval.jsonl", g.eval);
}

// ---------------------------------------------------------------------------
// Scoring
// ---------------------------------------------------------------------------

// Either one model conditioned on the full entry, or a bank combined by the
// confidence-weighted ensemble with chunked evaluation.
template <typename T>
struct Scorer {
    const Parameters<T>* single = nullptr;
    const ModelBank<T>* bank = nullptr;

    std::vector<double> token_logprobs(std::span<const TokenId> s) const {
        if (single) return single_model_token_logprobs(*single, s);
        if (bank) return eval_logprob_chunked(*bank, s).token_logprob;
        throw std::logic_error("Scorer: nothing to score with");
    }
};

template <typename T>
std::vector<EvalResult> evaluate(const Scorer<T>& scorer, const std::vector<EvalEntry>& entries) {
    std::vector<EvalResult> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(normalized_logprob(scorer.token_logprobs(e.tokens), e));
    return out;
}

inline json eval_result_to_json(std::size_t id, const EvalResult& r) {
    return json{{"entry_id", id},
                {"format_mode", r.format_mode},
                {"knowledge_mode", r.knowledge_mode},
                {"knowledge_index", r.knowledge_index},
                {"holdout", r.holdout},
                {"normalized_logprob", r.value},
                {"n_scored", r.n_scored}};
}

inline constexpr const char* cells_csv_header =
    "format_mode,knowledge_mode,holdout_only,mean_logprob,min,max,n_entries\n";

inline std::string cells_csv(const CellTable& t) {
    std::ostringstream os;
    os << cells_csv_header;
    for (const auto& [k, c] : t)
        os << c.format_mode << ',' << c.knowledge_mode << ',' << (c.holdout_only ? 1 : 0) << ','
           << format_double(c.mean) << ',' << format_double(c.min) << ',' << format_double(c.max) << ',' << c.count
           << '\n';
    return os.str();
}

// Trains the configured regime on generated data and evaluates the result.
struct RunResult {
    TrainReport report;
    std::vector<Parameters<float>> models;
    std::vector<EvalResult> results;
    CellTable cells;
};

inline RunResult train_and_evaluate(const ExperimentConfig& cfg, const GeneratedData& g,
                                    const ProgressFn& progress = {}) {
    RunResult run;
    const auto spec = cfg.cascade();
    run.models = train(g.train.tokens, spec, cfg.model, cfg.train, run.report, progress);
    if (is_cascade(cfg.train.regime)) {
        ModelBank<float> bank;
        bank.spec = spec;
        bank.kind = cfg.train.regime == Regime::original_cascade ? ModelBank<float>::Kind::original
                                                                 : ModelBank<float>::Kind::compressed;
        bank.models = run.models;
        run.results = evaluate(Scorer<float>{nullptr, &bank}, g.eval);
    } else {
        run.results = evaluate(Scorer<float>{&run.models.front(), nullptr}, g.eval);
    }
    run.cells = aggregate(run.results);
    return run;
}

}  // namespace cascade
