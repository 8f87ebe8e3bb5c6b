#pragma once

#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <exception>
#include <filesystem>
#include <map>
#include <mutex>
#include <optional>
#include <regex>
#include <string>
#include <string_view>
#include <thread>
#include <vector>

#include <openssl/evp.h>

#include <httplib.h>

#include "common.hpp"

namespace cascade::qual {

enum class PromptKind { rewrite, complete, judge };

inline std::string to_string(PromptKind k) {
    switch (k) {
        case PromptKind::rewrite: return "rewrite";
        case PromptKind::complete: return "complete";
        case PromptKind::judge: return "judge";
    }
    return "?";
}

inline constexpr std::string_view rewrite_template =
    R"tpl(You will help me rewrite a text into another style.
I will give you a text based on a fact from Wikipedia.
I left a blank, [BLANK], as well as its hint in the text.
Your task is to rewrite the text into a story, under the setting that a mother is telling a bedtime story to her kid.
Aside from the information in the original text, you should describe about the environment, the characters, and the plot.
The rewritten text should be coherent and consistent with the original text.
You must retain the blank and its hint in the rewritten text, for example, when the hint requires to output three items, you should include the hint in the rewritten text as well.

===== Text =====
{text})tpl";

inline constexpr std::string_view complete_template =
    R"tpl(I will give you a text based on a fact.
I left a blank, [BLANK], as well as its hint in the text.
Please fill in the blank after you read the text.
You should provide the most appropriate information, as accurate as possible.

===== Text =====
{text})tpl";

inline constexpr std::string_view judge_template =
    R"tpl(You are a judge to evaluate the response of the completion system.
I'll provide you a text with a blank, [BLANK].
Then, I'll provide you a response to fill in the blank, and its ground truth answer.
Please evaluate whether the response is correct or not, output a float number between 0 and 1 to represent the accuracy.
Identify each important aspects in the ground truth answer, and compare them with the response.
The floating number should be finally outputed in the following format:
```Accuracy
[ACCURACY]
```

===== Text =====
{text}

===== Response =====
{response}

===== Ground Truth =====
{answer})tpl";

inline std::string_view template_for(PromptKind k) {
    switch (k) {
        case PromptKind::rewrite: return rewrite_template;
        case PromptKind::complete: return complete_template;
        case PromptKind::judge: return judge_template;
    }
    return {};
}

using Slots = std::map<std::string, std::string>;

// Single pass over the template, so slot values containing "{text}" are left alone.
inline std::string substitute(std::string_view tpl, const Slots& slots) {
    std::string out;
    out.reserve(tpl.size());
    std::size_t i = 0;
    while (i < tpl.size()) {
        if (tpl[i] == '{') {
            auto close = tpl.find('}', i);
            if (close != std::string_view::npos) {
                std::string name(tpl.substr(i + 1, close - i - 1));
                auto it = slots.find(name);
                if (it == slots.end()) throw ConfigError("slots." + name, "missing prompt slot");
                out += it->second;
                i = close + 1;
                continue;
            }
        }
        out += tpl[i++];
    }
    return out;
}

inline std::string render_prompt(PromptKind kind, const Slots& slots,
                                 std::optional<std::size_t> attempt = std::nullopt) {
    std::string body = substitute(template_for(kind), slots);
    if (kind == PromptKind::complete && attempt)
        return "ATTEMPT " + std::to_string(*attempt) + "\n" + body;
    return body;
}

class JudgeParseError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

inline std::string_view rstrip(std::string_view s) {
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) s.remove_suffix(1);
    return s;
}

inline std::string_view lstrip(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t')) s.remove_prefix(1);
    return s;
}

inline double parse_accuracy(std::string_view text) {
    std::vector<std::string_view> lines;
    std::size_t pos = 0;
    while (pos <= text.size()) {
        auto nl = text.find('\n', pos);
        if (nl == std::string_view::npos) nl = text.size();
        lines.push_back(text.substr(pos, nl - pos));
        pos = nl + 1;
    }
    std::optional<std::size_t> open;
    for (std::size_t i = 0; i < lines.size(); ++i)
        if (rstrip(lines[i]) == "```Accuracy") open = i;
    if (!open) throw JudgeParseError("no ```Accuracy fence in judge output");

    for (std::size_t i = *open + 1; i < lines.size(); ++i) {
        auto line = lstrip(rstrip(lines[i]));
        if (line.starts_with("```")) break;
        std::string buf(line);
        const char* p = buf.c_str();
        while (*p) {
            while (*p == ' ' || *p == '\t') ++p;
            if (!*p) break;
            char* end = nullptr;
            double v = std::strtod(p, &end);
            if (end != p && std::isfinite(v)) {
                if (v < 0.0 || v > 1.0)
                    throw JudgeParseError("accuracy " + std::to_string(v) + " outside [0,1]");
                return v;
            }
            while (*p && *p != ' ' && *p != '\t') ++p;
        }
    }
    throw JudgeParseError("no number inside the ```Accuracy block");
}

inline std::string sha256_hex(std::string_view data) {
    unsigned char md[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (EVP_Digest(data.data(), data.size(), md, &len, EVP_sha256(), nullptr) != 1)
        throw std::runtime_error("sha256 failed");
    static constexpr char hex[] = "0123456789abcdef";
    std::string out;
    for (unsigned i = 0; i < len; ++i) {
        out += hex[md[i] >> 4];
        out += hex[md[i] & 15];
    }
    return out;
}

class TransportError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

struct Endpoint {
    std::string base_url;  // e.g. https://api.example.com/v1
    std::string api_key;
    std::string model;
    std::optional<double> temperature;
    int max_retries = 4;
    double backoff_s = 1.0;
    double timeout_s = 120.0;

    static Endpoint from_env() {
        Endpoint e;
        auto get = [](const char* name) -> std::string {
            const char* v = std::getenv(name);
            return v ? v : "";
        };
        e.base_url = get("CHAT_API_BASE");
        e.api_key = get("CHAT_API_KEY");
        e.model = get("CHAT_API_MODEL");
        if (e.base_url.empty()) throw ConfigError("CHAT_API_BASE", "environment variable not set");
        if (e.model.empty()) throw ConfigError("CHAT_API_MODEL", "environment variable not set");
        return e;
    }
};

class ChatClient {
public:
    explicit ChatClient(Endpoint ep) : ep_(std::move(ep)) {
        static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
        std::smatch m;
        if (!std::regex_match(ep_.base_url, m, url))
            throw ConfigError("CHAT_API_BASE", "expected http(s)://host[:port][/path], got '" + ep_.base_url + "'");
        origin_ = m[1];
        std::string prefix = m[2];
        while (!prefix.empty() && prefix.back() == '/') prefix.pop_back();
        path_ = prefix + "/chat/completions";
    }

    const Endpoint& endpoint() const { return ep_; }
    std::size_t requests() const { return requests_.load(); }

    std::string request_body(const std::string& prompt) const {
        json body = {{"model", ep_.model},
                     {"messages", json::array({{{"role", "user"}, {"content", prompt}}})}};
        if (ep_.temperature) body["temperature"] = *ep_.temperature;
        return body.dump();
    }

    std::string complete(const std::string& prompt) {
        const std::string body = request_body(prompt);
        Rng jitter(fnv1a64(prompt) ^ 0x9e3779b97f4a7c15ull);
        std::string last_error;
        for (int attempt = 0; attempt <= ep_.max_retries; ++attempt) {
            if (attempt > 0) {
                double delay = ep_.backoff_s * std::ldexp(1.0, attempt - 1) * (0.5 + jitter.uniform());
                std::this_thread::sleep_for(std::chrono::duration<double>(delay));
            }
            ++requests_;
            httplib::Client cli(origin_);
            auto secs = std::chrono::duration<double>(ep_.timeout_s);
            cli.set_connection_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
            cli.set_read_timeout(std::chrono::duration_cast<std::chrono::microseconds>(secs));
            httplib::Headers headers;
            if (!ep_.api_key.empty()) headers.emplace("Authorization", "Bearer " + ep_.api_key);
            auto res = cli.Post(path_, headers, body, "application/json");
            if (!res) {
                last_error = "transport: " + httplib::to_string(res.error());
                continue;
            }
            if (res->status == 429 || res->status >= 500) {
                last_error = "HTTP " + std::to_string(res->status);
                continue;
            }
            if (res->status != 200)
                throw TransportError("HTTP " + std::to_string(res->status) + ": " + res->body.substr(0, 200));
            try {
                auto j = json::parse(res->body);
                return j.at("choices").at(0).at("message").at("content").get<std::string>();
            } catch (const json::exception& e) {
                throw TransportError(std::string("malformed chat response: ") + e.what());
            }
        }
        throw TransportError("gave up after " + std::to_string(ep_.max_retries + 1) + " tries (" + last_error + ")");
    }

private:
    Endpoint ep_;
    std::string origin_;
    std::string path_;
    std::atomic<std::size_t> requests_{0};
};

// One file per (kind, prompt hash, attempt). The hash covers model and temperature too.
class TranscriptCache {
public:
    explicit TranscriptCache(std::filesystem::path dir) : dir_(std::move(dir)) {}

    std::filesystem::path path_for(PromptKind kind, const std::string& key_hash, std::size_t attempt) const {
        return dir_ / to_string(kind) / (key_hash + "_" + std::to_string(attempt) + ".json");
    }

    std::optional<std::string> get(PromptKind kind, const std::string& key_hash, std::size_t attempt) const {
        auto p = path_for(kind, key_hash, attempt);
        std::error_code ec;
        if (!std::filesystem::exists(p, ec)) return std::nullopt;
        return io::read_json(p).at("response").get<std::string>();
    }

    void put(PromptKind kind, const std::string& key_hash, std::size_t attempt, const std::string& prompt,
             const std::string& response) {
        std::lock_guard lock(mu_);
        auto p = path_for(kind, key_hash, attempt);
        std::filesystem::create_directories(p.parent_path());
        io::write_json(p, json{{"kind", to_string(kind)},
                               {"attempt", attempt},
                               {"prompt", prompt},
                               {"response", response}});
    }

private:
    std::filesystem::path dir_;
    std::mutex mu_;
};

struct CompletionCase {
    std::string original;
    std::string answer;
    std::optional<std::string> altered;

    void validate() const {
        std::size_t count = 0;
        for (auto p = original.find("[BLANK]"); p != std::string::npos; p = original.find("[BLANK]", p + 1)) ++count;
        if (count != 1)
            throw DataError("case.original must contain exactly one [BLANK], found " + std::to_string(count));
    }
};

inline CompletionCase case_from_json(const json& j) {
    CompletionCase c;
    c.original = j.at("original").get<std::string>();
    c.answer = j.at("answer").get<std::string>();
    if (j.contains("altered") && !j["altered"].is_null()) c.altered = j["altered"].get<std::string>();
    c.validate();
    return c;
}

struct AttemptRecord {
    std::size_t attempt = 0;
    std::optional<double> accuracy;
    std::string error;  // empty on success
};

struct VariantResult {
    std::vector<AttemptRecord> attempts;
    std::size_t transport_failures = 0;
    std::size_t parse_failures = 0;

    std::size_t scored() const {
        std::size_t n = 0;
        for (const auto& a : attempts) n += a.accuracy.has_value();
        return n;
    }
    double mean() const {
        double s = 0;
        std::size_t n = 0;
        for (const auto& a : attempts)
            if (a.accuracy) s += *a.accuracy, ++n;
        return n ? s / double(n) : std::nan("");
    }
};

struct CaseResult {
    std::string altered;
    VariantResult original;
    VariantResult altered_result;
    std::size_t network_calls = 0;
};

inline json variant_to_json(const VariantResult& v) {
    json acc = json::array();
    json errors = json::array();
    for (const auto& a : v.attempts) {
        acc.push_back(a.accuracy ? json(*a.accuracy) : json(nullptr));
        if (!a.error.empty()) errors.push_back({{"attempt", a.attempt}, {"error", a.error}});
    }
    double m = v.mean();
    return {{"mean", std::isfinite(m) ? json(m) : json(nullptr)},
            {"scored", v.scored()},
            {"accuracies", acc},
            {"failures", {{"transport", v.transport_failures}, {"parse", v.parse_failures}, {"detail", errors}}}};
}

inline json case_result_to_json(const CaseResult& r) {
    return {{"altered_text", r.altered},
            {"original", variant_to_json(r.original)},
            {"altered", variant_to_json(r.altered_result)},
            {"network_calls", r.network_calls}};
}

struct RunOptions {
    std::size_t n_attempts = 100;
    std::size_t parallelism = 4;
};

class CaseRunner {
public:
    CaseRunner(ChatClient& client, TranscriptCache& cache) : client_(client), cache_(cache) {}

    std::string fetch(PromptKind kind, const std::string& prompt, std::size_t attempt) {
        const auto& ep = client_.endpoint();
        std::string key = sha256_hex(ep.model + "\n" +
                                     (ep.temperature ? std::to_string(*ep.temperature) : std::string("default")) +
                                     "\n" + prompt);
        if (auto hit = cache_.get(kind, key, attempt)) return *hit;
        ++calls_;
        std::string response = client_.complete(prompt);
        cache_.put(kind, key, attempt, prompt, response);
        return response;
    }

    CaseResult run(const CompletionCase& c, const RunOptions& opt) {
        c.validate();
        if (opt.n_attempts == 0) throw ConfigError("n_attempts", "must be positive");
        calls_ = 0;
        CaseResult result;
        result.altered = c.altered ? *c.altered : fetch(PromptKind::rewrite, render_prompt(PromptKind::rewrite, {{"text", c.original}}), 0);

        const std::string* texts[2] = {&c.original, &result.altered};
        VariantResult* outs[2] = {&result.original, &result.altered_result};
        for (auto* o : outs) o->attempts.resize(opt.n_attempts);

        const std::size_t n_tasks = 2 * opt.n_attempts;
        std::atomic<std::size_t> next{0};
        std::mutex err_mu;
        std::exception_ptr fatal;

        auto worker = [&] {
            for (;;) {
                std::size_t t = next++;
                if (t >= n_tasks) return;
                std::size_t v = t / opt.n_attempts;
                std::size_t i = t % opt.n_attempts + 1;
                AttemptRecord& rec = outs[v]->attempts[i - 1];
                rec.attempt = i;
                try {
                    std::string completion =
                        fetch(PromptKind::complete, render_prompt(PromptKind::complete, {{"text", *texts[v]}}, i), i);
                    std::string verdict = fetch(PromptKind::judge,
                                                render_prompt(PromptKind::judge, {{"text", *texts[v]},
                                                                                  {"response", completion},
                                                                                  {"answer", c.answer}}),
                                                i);
                    try {
                        rec.accuracy = parse_accuracy(verdict);
                    } catch (const JudgeParseError& e) {
                        rec.error = std::string("parse: ") + e.what();
                    }
                } catch (const TransportError& e) {
                    rec.error = std::string("transport: ") + e.what();
                } catch (...) {
                    std::lock_guard lock(err_mu);
                    if (!fatal) fatal = std::current_exception();
                    next = n_tasks;
                }
            }
        };

        std::size_t n_threads = std::max<std::size_t>(1, std::min(opt.parallelism, n_tasks));
        std::vector<std::thread> pool;
        for (std::size_t k = 0; k < n_threads; ++k) pool.emplace_back(worker);
        for (auto& th : pool) th.join();
        if (fatal) std::rethrow_exception(fatal);

        for (auto* o : outs)
            for (const auto& a : o->attempts) {
                if (a.error.starts_with("parse")) ++o->parse_failures;
                else if (a.error.starts_with("transport")) ++o->transport_failures;
            }
        result.network_calls = calls_.load();
        return result;
    }

private:
    ChatClient& client_;
    TranscriptCache& cache_;
    std::atomic<std::size_t> calls_{0};
};

}  // namespace cascade::qual
