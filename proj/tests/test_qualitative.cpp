#include <cascade/qualitative.hpp>

#include <gtest/gtest.h>

#include "mock_chat.hpp"

namespace fs = std::filesystem;
using namespace cascade;
using namespace cascade::qual;

namespace {

std::string golden(const std::string& name) { return io::read_text(fs::path(CASCADE_TEST_DATA) / name); }

fs::path fresh_dir(const std::string& name) {
    auto d = fs::temp_directory_path() / ("cascade_qual_" + name + "_" + std::to_string(::getpid()));
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

Endpoint local(const mock::ChatServer& s) {
    Endpoint e;
    e.base_url = s.base_url();
    e.model = "mock-model";
    e.api_key = "sk-test";
    e.backoff_s = 0.001;
    e.max_retries = 2;
    e.timeout_s = 5;
    return e;
}

const CompletionCase kCase{"The lighthouse was built in [BLANK] (a year) by the harbor guild.", "1871",
                           std::nullopt};

}  // namespace

TEST(Templates, MatchGoldenFiles) {
    EXPECT_EQ(std::string(rewrite_template), golden("template_rewrite.txt"));
    EXPECT_EQ(std::string(complete_template), golden("template_complete.txt"));
    EXPECT_EQ(std::string(judge_template), golden("template_judge.txt"));
}

TEST(Templates, IdentitySubstitutionReproducesTemplate) {
    Slots id{{"text", "{text}"}, {"response", "{response}"}, {"answer", "{answer}"}};
    EXPECT_EQ(render_prompt(PromptKind::judge, id), golden("template_judge.txt"));
    EXPECT_EQ(render_prompt(PromptKind::rewrite, id), golden("template_rewrite.txt"));
}

TEST(Templates, RewriteEndsWithTextSection) {
    auto p = render_prompt(PromptKind::rewrite, {{"text", "X"}});
    EXPECT_TRUE(p.ends_with("\n===== Text =====\nX"));
}

TEST(Templates, JudgeCarriesAccuracyFence) {
    auto p = render_prompt(PromptKind::judge, {{"text", "t"}, {"response", "r"}, {"answer", "a"}});
    EXPECT_NE(p.find("\n```Accuracy\n[ACCURACY]\n```\n"), std::string::npos);
    EXPECT_TRUE(p.ends_with("===== Response =====\nr\n\n===== Ground Truth =====\na"));
}

TEST(Templates, CompletionAttemptPrefix) {
    auto p = render_prompt(PromptKind::complete, {{"text", "T"}}, 7);
    EXPECT_TRUE(p.starts_with("ATTEMPT 7\nI will give you a text based on a fact.\n"));
    EXPECT_EQ(p.substr(std::string("ATTEMPT 7\n").size()), render_prompt(PromptKind::complete, {{"text", "T"}}));
}

TEST(Templates, MissingSlotThrows) {
    EXPECT_THROW(render_prompt(PromptKind::judge, {{"text", "t"}, {"answer", "a"}}), ConfigError);
    EXPECT_THROW(render_prompt(PromptKind::complete, {}), ConfigError);
}

TEST(Templates, EmptySlotStillRenders) {
    auto p = render_prompt(PromptKind::complete, {{"text", ""}});
    EXPECT_TRUE(p.ends_with("===== Text =====\n"));
}

TEST(Templates, SlotValuesAreNotRescanned) {
    auto p = render_prompt(PromptKind::judge, {{"text", "{answer}"}, {"response", "{text}"}, {"answer", "A"}});
    EXPECT_NE(p.find("===== Text =====\n{answer}\n"), std::string::npos);
    EXPECT_NE(p.find("===== Response =====\n{text}\n"), std::string::npos);
}

TEST(ParseAccuracy, FencedValues) {
    EXPECT_DOUBLE_EQ(parse_accuracy("```Accuracy\n0.2\n```"), 0.2);
    EXPECT_DOUBLE_EQ(parse_accuracy("```Accuracy\n1.0\n```"), 1.0);
    EXPECT_DOUBLE_EQ(parse_accuracy("```Accuracy\n0.75\n```"), 0.75);
    EXPECT_DOUBLE_EQ(parse_accuracy("```Accuracy\n0.0\n```"), 0.0);
}

TEST(ParseAccuracy, SurroundingProseAndTrailingSpaces) {
    EXPECT_DOUBLE_EQ(parse_accuracy("Two of three parts match.\n\n```Accuracy\n0.95\n```   \n"), 0.95);
    EXPECT_DOUBLE_EQ(parse_accuracy("```Accuracy   \r\n1\r\n```\r\n"), 1.0);
}

TEST(ParseAccuracy, LastFenceWins) {
    EXPECT_DOUBLE_EQ(parse_accuracy("```Accuracy\n0.1\n```\nOn reflection:\n```Accuracy\n0.6\n```"), 0.6);
}

TEST(ParseAccuracy, FirstNumberInsideBlock) {
    EXPECT_DOUBLE_EQ(parse_accuracy("```Accuracy\nscore: 0.4 (was 0.9)\n```"), 0.4);
}

TEST(ParseAccuracy, Errors) {
    EXPECT_THROW(parse_accuracy("no fence here"), JudgeParseError);
    EXPECT_THROW(parse_accuracy("```accuracy\n0.5\n```"), JudgeParseError);
    EXPECT_THROW(parse_accuracy("```Accuracy\n1.5\n```"), JudgeParseError);
    EXPECT_THROW(parse_accuracy("```Accuracy\n-0.1\n```"), JudgeParseError);
    EXPECT_THROW(parse_accuracy("```Accuracy\nn/a\n```"), JudgeParseError);
    EXPECT_THROW(parse_accuracy(""), JudgeParseError);
}

TEST(Hash, Sha256KnownVector) {
    EXPECT_EQ(sha256_hex("abc"), "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
}

TEST(Case, ValidationCountsBlanks) {
    EXPECT_NO_THROW(kCase.validate());
    EXPECT_THROW((CompletionCase{"no blank", "a", {}}).validate(), DataError);
    EXPECT_THROW((CompletionCase{"[BLANK] and [BLANK]", "a", {}}).validate(), DataError);
    auto c = case_from_json(json{{"original", "x [BLANK]"}, {"answer", "y"}, {"altered", "z [BLANK]"}});
    ASSERT_TRUE(c.altered);
    EXPECT_EQ(*c.altered, "z [BLANK]");
}

TEST(Endpoint, RejectsBadBaseUrl) {
    Endpoint e;
    e.base_url = "ftp://nowhere";
    e.model = "m";
    EXPECT_THROW(ChatClient{e}, ConfigError);
}

TEST(RunCase, MockOracleGivesJudgeConstant) {
    mock::ChatServer server([](const std::string& p) { return mock::oracle(p, "1871"); });
    auto dir = fresh_dir("oracle");
    ChatClient client(local(server));
    TranscriptCache cache(dir);
    CaseRunner runner(client, cache);

    auto r = runner.run(kCase, {.n_attempts = 5, .parallelism = 3});
    EXPECT_NEAR(r.original.mean(), 0.8, 1e-12);
    EXPECT_NEAR(r.altered_result.mean(), 0.8, 1e-12);
    EXPECT_EQ(r.original.scored(), 5u);
    EXPECT_EQ(r.network_calls, 1u + 2 * 5 * 2);
    EXPECT_EQ(server.hits(), r.network_calls);
    EXPECT_NE(r.altered.find("[BLANK]"), std::string::npos);

    // Attempt prefixes are distinct so no two completion prompts collide.
    std::set<std::string> prompts;
    for (const auto& b : server.bodies()) {
        EXPECT_EQ(b.at("model"), "mock-model");
        EXPECT_FALSE(b.contains("temperature"));
        prompts.insert(b["messages"][0]["content"].get<std::string>());
    }
    EXPECT_GE(prompts.size(), 1u + 2 * 5);
    for (const auto& h : server.auth_headers()) EXPECT_EQ(h, "Bearer sk-test");

    // Populated cache: zero network calls and identical output.
    auto again = runner.run(kCase, {.n_attempts = 5, .parallelism = 2});
    EXPECT_EQ(again.network_calls, 0u);
    EXPECT_EQ(server.hits(), r.network_calls);
    EXPECT_EQ(case_result_to_json(again)["original"], case_result_to_json(r)["original"]);
    fs::remove_all(dir);
}

TEST(RunCase, SingleAttemptAndSuppliedAlteredText) {
    mock::ChatServer server([](const std::string& p) { return mock::oracle(p, "1871", 0.25); });
    auto dir = fresh_dir("single");
    ChatClient client(local(server));
    TranscriptCache cache(dir);
    CaseRunner runner(client, cache);
    CompletionCase c = kCase;
    c.altered = "Once upon a time a lighthouse rose in [BLANK] (a year).";
    auto r = runner.run(c, {.n_attempts = 1, .parallelism = 4});
    EXPECT_EQ(r.altered, *c.altered);
    EXPECT_DOUBLE_EQ(r.original.mean(), 0.25);
    EXPECT_DOUBLE_EQ(r.altered_result.mean(), 0.25);
    EXPECT_EQ(r.network_calls, 4u);  // no rewrite call
    fs::remove_all(dir);
}

TEST(RunCase, ParseFailuresAreCountedAndExcluded) {
    // Even attempts get an unfenced verdict.
    mock::ChatServer server([](const std::string& p) -> mock::Reply {
        if (p.starts_with("ATTEMPT")) {
            int i = std::stoi(p.substr(8));
            return {200, i % 2 ? "1871" : "garbled"};
        }
        if (p.starts_with("You are a judge")) {
            if (p.find("===== Response =====\ngarbled") != std::string::npos) return {200, "I cannot tell."};
            return {200, "```Accuracy\n1.0\n```"};
        }
        return mock::oracle(p, "1871");
    });
    auto dir = fresh_dir("parse");
    ChatClient client(local(server));
    TranscriptCache cache(dir);
    CaseRunner runner(client, cache);
    auto r = runner.run(kCase, {.n_attempts = 6, .parallelism = 4});
    EXPECT_EQ(r.original.parse_failures, 3u);
    EXPECT_EQ(r.altered_result.parse_failures, 3u);
    EXPECT_EQ(r.original.scored(), 3u);
    EXPECT_DOUBLE_EQ(r.original.mean(), 1.0);
    auto j = case_result_to_json(r);
    EXPECT_TRUE(j["original"]["accuracies"][1].is_null());
    EXPECT_EQ(j["original"]["failures"]["parse"], 3);
    fs::remove_all(dir);
}

TEST(RunCase, TransportFailuresAfterRetries) {
    mock::ChatServer server([](const std::string& p) -> mock::Reply {
        if (p.starts_with("You are a judge")) return {503, ""};
        return mock::oracle(p, "1871");
    });
    auto dir = fresh_dir("transport");
    ChatClient client(local(server));
    TranscriptCache cache(dir);
    CaseRunner runner(client, cache);
    auto r = runner.run(kCase, {.n_attempts = 2, .parallelism = 2});
    EXPECT_EQ(r.original.transport_failures, 2u);
    EXPECT_EQ(r.altered_result.transport_failures, 2u);
    EXPECT_TRUE(std::isnan(r.original.mean()));
    // Each judge request is tried max_retries + 1 = 3 times.
    EXPECT_EQ(server.hits(), 1u + 4 + 4 * 3);
    EXPECT_TRUE(case_result_to_json(r)["original"]["mean"].is_null());
    fs::remove_all(dir);
}

TEST(RunCase, ClientErrorIsNotRetried) {
    mock::ChatServer server([](const std::string&) { return mock::Reply{400, ""}; });
    auto ep = local(server);
    ChatClient client(ep);
    EXPECT_THROW(client.complete("hello"), TransportError);
    EXPECT_EQ(server.hits(), 1u);
}

TEST(RunCase, TemperaturePassedThroughAndKeysCache) {
    mock::ChatServer server([](const std::string& p) { return mock::oracle(p, "1871"); });
    auto dir = fresh_dir("temp");
    auto ep = local(server);
    ep.temperature = 0.7;
    ChatClient client(ep);
    TranscriptCache cache(dir);
    CaseRunner runner(client, cache);
    runner.run(kCase, {.n_attempts = 1, .parallelism = 1});
    for (const auto& b : server.bodies()) EXPECT_DOUBLE_EQ(b.at("temperature").get<double>(), 0.7);

    ep.temperature = 0.0;
    ChatClient other(ep);
    CaseRunner runner2(other, cache);
    auto r = runner2.run(kCase, {.n_attempts = 1, .parallelism = 1});
    EXPECT_EQ(r.network_calls, 5u);
    fs::remove_all(dir);
}

TEST(RunCase, UnreachableEndpointRecordsTransportFailure) {
    Endpoint e;
    e.base_url = "http://127.0.0.1:1/v1";
    e.model = "m";
    e.max_retries = 1;
    e.backoff_s = 0.001;
    e.timeout_s = 1;
    ChatClient client(e);
    EXPECT_THROW(client.complete("x"), TransportError);
    EXPECT_EQ(client.requests(), 2u);
}

TEST(ParseAccuracy, PublishedJudgeVerdicts) {
    EXPECT_DOUBLE_EQ(parse_accuracy(golden("verdict_original1.txt")), 1.0);
    EXPECT_DOUBLE_EQ(parse_accuracy(golden("verdict_altered1.txt")), 0.2);
    EXPECT_DOUBLE_EQ(parse_accuracy(golden("verdict_original2.txt")), 0.95);
    EXPECT_DOUBLE_EQ(parse_accuracy(golden("verdict_altered2.txt")), 0.75);
    // Closing fence carries trailing spaces in this one.
    EXPECT_DOUBLE_EQ(parse_accuracy(golden("verdict_original3.txt")), 1.0);
    EXPECT_DOUBLE_EQ(parse_accuracy(golden("verdict_altered3.txt")), 0.0);
}

TEST(CaseFromJson, PublishedCasesHaveOneBlank) {
    for (const char* name : {"case1.json", "case2.json", "case3.json"}) {
        auto c = case_from_json(json::parse(golden(name)));
        EXPECT_NO_THROW(c.validate()) << name;
        ASSERT_TRUE(c.altered.has_value());
    }
}
