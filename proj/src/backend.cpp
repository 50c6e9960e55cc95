#include "arpipe/backend.hpp"

#include "arpipe/prompts.hpp"
#include "arpipe/util/digest.hpp"
#include "arpipe/util/rng.hpp"
#include "arpipe/util/text.hpp"

#include <httplib.h>

#include <algorithm>
#include <cmath>
#include <thread>

namespace arpipe::backend {

using util::Rng;

std::string_view to_string(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::timeout: return "timeout";
    case ErrorKind::throttled: return "throttled";
    case ErrorKind::server: return "server";
    case ErrorKind::connection: return "connection";
    case ErrorKind::unavailable: return "unavailable";
    case ErrorKind::malformed: return "malformed";
    case ErrorKind::protocol: return "protocol";
    case ErrorKind::auth: return "auth";
    }
    return "unknown";
}

bool is_retryable(ErrorKind kind) {
    switch (kind) {
    case ErrorKind::timeout:
    case ErrorKind::throttled:
    case ErrorKind::server:
    case ErrorKind::connection:
    case ErrorKind::unavailable:
        return true;
    case ErrorKind::malformed: // the client retries this at most once
    case ErrorKind::protocol:
    case ErrorKind::auth:
        return false;
    }
    return false;
}

void validate(const BackendPolicy& policy) {
    if (policy.max_in_flight < 1) throw Error("backend policy: max_in_flight must be >= 1");
    if (policy.max_attempts < 1) throw Error("backend policy: max_attempts must be >= 1");
    if (policy.requests_per_minute < 0) {
        throw Error("backend policy: requests_per_minute must be >= 0");
    }
    if (policy.timeout_seconds <= 0) throw Error("backend policy: timeout_seconds must be > 0");
    if (policy.backoff_base_ms < 0) throw Error("backend policy: backoff_base_ms must be >= 0");
}

// ---------------------------------------------------------------------------
// RateLimiter
// ---------------------------------------------------------------------------

RateLimiter::RateLimiter(int per_minute, ClockFn clock, SleepFn sleep)
    : per_minute_(per_minute),
      clock_(clock ? std::move(clock) : [] { return std::chrono::steady_clock::now(); }),
      sleep_(sleep ? std::move(sleep)
                   : [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); }) {
    if (per_minute_ < 1) throw Error("rate limiter: per_minute must be >= 1");
}

void RateLimiter::acquire() {
    constexpr auto window = std::chrono::seconds(60);
    while (true) {
        std::chrono::milliseconds wait{0};
        {
            std::lock_guard lock(mu_);
            const TimePoint now = clock_();
            while (!window_.empty() && now - window_.front() >= window) {
                window_.pop_front();
            }
            if (static_cast<int>(window_.size()) < per_minute_) {
                window_.push_back(now);
                return;
            }
            wait = std::chrono::duration_cast<std::chrono::milliseconds>(
                window_.front() + window - now);
        }
        sleep_(std::max(wait, std::chrono::milliseconds(1)));
    }
}

// ---------------------------------------------------------------------------
// BackendClient
// ---------------------------------------------------------------------------

BackendClient::BackendClient(std::shared_ptr<TextBackend> transport, BackendPolicy policy,
                             CallSink call_sink)
    : transport_(std::move(transport)), policy_(policy), call_sink_(std::move(call_sink)) {
    if (!transport_) throw Error("backend client: null transport");
    validate(policy_);
    if (policy_.requests_per_minute > 0) {
        limiter_ = std::make_unique<RateLimiter>(policy_.requests_per_minute);
    }
}

namespace {

std::chrono::milliseconds backoff_delay(int base_ms, int attempt, std::uint64_t salt) {
    if (base_ms <= 0) return std::chrono::milliseconds(0);
    // base * 2^(attempt-1), plus up to 50% jitter.
    const double expo = static_cast<double>(base_ms) * std::pow(2.0, attempt - 1);
    Rng rng(util::derive_seed(salt, {"backoff", std::to_string(attempt)}));
    const double jitter = 1.0 + 0.5 * rng.unit();
    return std::chrono::milliseconds(static_cast<long long>(expo * jitter));
}

} // namespace

Outcome BackendClient::attempt_loop(const GenerationRequest& req) {
    const std::string prompt_hash = util::sha256_hex16(req.prompt);
    RequestError err;
    bool malformed_retried = false;

    int attempt = 0;
    while (attempt < policy_.max_attempts) {
        ++attempt;
        if (limiter_) limiter_->acquire();
        try {
            std::string text = transport_->complete(req);
            GenerationResult result;
            result.text = std::move(text);
            result.prompt_hash = prompt_hash;
            result.model_id = transport_->model_id();
            result.attempt_count = attempt;
            if (call_sink_) {
                call_sink_({prompt_hash, req.tag, "ok", attempt,
                            static_cast<long long>(util::word_count(result.text))});
            }
            Outcome out;
            out.result = std::move(result);
            return out;
        } catch (const TransportError& e) {
            err.last_kind = e.kind;
            err.message = e.what();
            err.attempt_count = attempt;
            err.attempt_log.push_back("attempt " + std::to_string(attempt) + ": " +
                                      std::string(to_string(e.kind)) + ": " + e.what());
            bool retry = is_retryable(e.kind);
            if (e.kind == ErrorKind::malformed && !malformed_retried) {
                malformed_retried = true;
                retry = true;
            }
            if (!retry || attempt >= policy_.max_attempts) break;
            const auto delay =
                backoff_delay(policy_.backoff_base_ms, attempt, util::stable_hash64(req.prompt));
            if (delay.count() > 0) std::this_thread::sleep_for(delay);
        }
    }

    if (call_sink_) {
        call_sink_({prompt_hash, req.tag, std::string(to_string(err.last_kind)),
                    err.attempt_count, 0});
    }
    Outcome out;
    out.error = std::move(err);
    return out;
}

Outcome BackendClient::try_generate(const GenerationRequest& req) {
    return attempt_loop(req);
}

GenerationResult BackendClient::generate(const GenerationRequest& req) {
    Outcome out = attempt_loop(req);
    if (out.result) return std::move(*out.result);
    std::string msg = "generation failed after " + std::to_string(out.error->attempt_count) +
                      " attempt(s): " + out.error->message;
    for (const auto& line : out.error->attempt_log) msg += "\n  " + line;
    throw Error(msg);
}

std::vector<Outcome> BackendClient::generate_batch(const std::vector<GenerationRequest>& reqs) {
    std::vector<Outcome> results(reqs.size());
    if (reqs.empty()) return results;

    const int workers = std::min<int>(policy_.max_in_flight, static_cast<int>(reqs.size()));
    std::atomic<std::size_t> next{0};
    std::vector<std::thread> pool;
    pool.reserve(workers);
    for (int w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            while (true) {
                const std::size_t i = next.fetch_add(1);
                if (i >= reqs.size()) return;
                results[i] = attempt_loop(reqs[i]);
            }
        });
    }
    for (auto& t : pool) t.join();
    return results;
}

// ---------------------------------------------------------------------------
// MockBackend
// ---------------------------------------------------------------------------

PromptShape classify_prompt(std::string_view prompt) {
    const auto has = [&](std::string_view needle) {
        return prompt.find(needle) != std::string_view::npos;
    };
    if (has("What are some strategies specific to this document")) {
        return PromptShape::strategies_task_agnostic;
    }
    if (has("I need to study for a trivia competition")) {
        return PromptShape::strategies_task_specific;
    }
    if (has("write an informational paragraph in your own words")) return PromptShape::paraphrase;
    if (has("Generate a comprehensive list of all questions")) return PromptShape::synth_qa;
    if (has("Here's a learning strategy:")) return PromptShape::apply_strategy;
    if (has("Can the following question be answered using only the information")) {
        return PromptShape::answerability_judge;
    }
    if (has("Grade the candidate answer against the gold answer")) {
        return PromptShape::answer_grader;
    }
    if (has("Answer the question concisely")) return PromptShape::qa_answer;
    return PromptShape::unknown;
}

MockBehavior mock_behavior_from_json(const json& j) {
    MockBehavior b;
    b.seed = j.value("seed", b.seed);
    b.model_id = j.value("model_id", b.model_id);
    b.strategies_per_proposal = j.value("strategies_per_proposal", b.strategies_per_proposal);
    b.question_block_lines = j.value("question_block_lines", b.question_block_lines);
    b.emit_marker = j.value("emit_marker", b.emit_marker);
    b.qa_pairs_per_output = j.value("qa_pairs_per_output", b.qa_pairs_per_output);
    b.words_per_output = j.value("words_per_output", b.words_per_output);
    b.fail_unknown = j.value("fail_unknown", b.fail_unknown);
    b.latency_ms = j.value("latency_ms", b.latency_ms);
    b.fail_substring = j.value("fail_substring", b.fail_substring);
    if (j.contains("fail_substring_retryable")) {
        b.fail_substring_kind = j["fail_substring_retryable"].get<bool>() ? ErrorKind::server
                                                                          : ErrorKind::protocol;
    }
    b.fail_first_attempts = j.value("fail_first_attempts", b.fail_first_attempts);
    b.fail_after_requests = j.value("fail_after_requests", b.fail_after_requests);
    if (b.strategies_per_proposal < 0 || b.question_block_lines < 0 ||
        b.qa_pairs_per_output < 0 || b.words_per_output < 0) {
        throw Error("mock behavior: counts must be >= 0");
    }
    return b;
}

MockBackend::MockBackend(MockBehavior behavior) : behavior_(std::move(behavior)) {}

namespace {

constexpr std::string_view k_vocab[] = {
    "the",     "a",        "quietly", "system",  "records", "between", "several", "known",
    "pattern", "observed", "under",   "various", "results", "holds",   "across",  "each",
    "method",  "value",    "toward",  "process", "details", "remains", "central", "linked",
    "steady",  "common",   "order",   "within",  "given",   "noted",   "early",   "later",
};

std::string_view doc_section_start(PromptShape shape) {
    // apply_strategy prompts embed the strategy before the document, but the
    // document tag pair is unambiguous in every template.
    (void)shape;
    return "<document>\n";
}

std::string extract_document(std::string_view prompt, PromptShape shape) {
    const std::string_view open = doc_section_start(shape);
    const std::size_t at = prompt.find(open);
    if (at == std::string_view::npos) return {};
    const std::size_t begin = at + open.size();
    const std::size_t end = prompt.rfind("\n</document>");
    if (end == std::string_view::npos || end < begin) return {};
    return std::string(prompt.substr(begin, end - begin));
}

std::vector<std::string> content_words(const std::string& text) {
    std::vector<std::string> out;
    std::vector<std::string_view> seen;
    for (const auto w : util::split_words(text)) {
        if (w.size() < 4) continue;
        if (std::find(seen.begin(), seen.end(), w) != seen.end()) continue;
        seen.push_back(w);
        out.emplace_back(w);
        if (out.size() >= 200) break;
    }
    return out;
}

std::string pick_word(Rng& rng, const std::vector<std::string>& content) {
    if (!content.empty() && rng.bounded(10) < 6) {
        return content[rng.bounded(content.size())];
    }
    return std::string(k_vocab[rng.bounded(std::size(k_vocab))]);
}

void capitalize(std::string& w) {
    if (!w.empty() && w[0] >= 'a' && w[0] <= 'z') w[0] = static_cast<char>(w[0] - 'a' + 'A');
}

std::string make_prose(Rng& rng, int words, const std::vector<std::string>& content) {
    std::string out;
    int left = 0;
    for (int i = 0; i < words; ++i) {
        std::string w = pick_word(rng, content);
        if (left == 0) {
            capitalize(w);
            left = static_cast<int>(rng.range(6, 12));
        }
        out += w;
        --left;
        if (left == 0 || i + 1 == words) {
            out += '.';
            if (i + 1 < words) out += ' ';
        } else {
            out += ' ';
        }
    }
    return out;
}

std::string make_question(Rng& rng, const std::vector<std::string>& content) {
    std::string topic = pick_word(rng, content);
    std::string extra = pick_word(rng, content);
    return "What is " + topic + " " + extra + "?";
}

// One "## " line per strategy, matching the shape the proposal templates
// request.
std::string make_strategy_blocks(Rng& rng, int count, const std::vector<std::string>& content) {
    std::string out;
    for (int i = 0; i < count; ++i) {
        if (i > 0) out += '\n';
        out += "## ";
        std::string title = pick_word(rng, content);
        capitalize(title);
        out += title;
        const int extra = static_cast<int>(rng.range(3, 6));
        for (int w = 0; w < extra; ++w) out += " " + pick_word(rng, content);
    }
    return out;
}

// "Label: value" where the value runs to end of line.
std::string line_after(std::string_view prompt, std::string_view label) {
    const std::size_t at = prompt.find(label);
    if (at == std::string_view::npos) return {};
    const std::size_t begin = at + label.size();
    std::size_t end = prompt.find('\n', begin);
    if (end == std::string_view::npos) end = prompt.size();
    return std::string(prompt.substr(begin, end - begin));
}

std::string text_after(std::string_view prompt, std::string_view label) {
    const std::size_t at = prompt.find(label);
    if (at == std::string_view::npos) return {};
    return std::string(prompt.substr(at + label.size()));
}

std::string last_nonempty_line(std::string_view prompt) {
    std::string last;
    for (const auto& line : util::split_lines(prompt)) {
        if (!util::trim(line).empty()) last = std::string(util::trim(line));
    }
    return last;
}

} // namespace

std::string MockBackend::complete(const GenerationRequest& req) {
    if (behavior_.latency_ms > 0) {
        std::this_thread::sleep_for(std::chrono::milliseconds(behavior_.latency_ms));
    }

    const long long n = requests_.fetch_add(1) + 1;
    if (behavior_.fail_after_requests >= 0 && n > behavior_.fail_after_requests) {
        throw TransportError(ErrorKind::unavailable, "mock: request budget exhausted");
    }
    if (!behavior_.fail_substring.empty() &&
        req.prompt.find(behavior_.fail_substring) != std::string::npos) {
        throw TransportError(behavior_.fail_substring_kind, "mock: matched failure substring");
    }
    if (behavior_.fail_first_attempts > 0) {
        const std::string key = util::sha256_hex16(req.prompt);
        std::lock_guard lock(mu_);
        const int seen = ++attempts_seen_[key];
        if (seen <= behavior_.fail_first_attempts) {
            throw TransportError(ErrorKind::server, "mock: injected transient failure " +
                                                        std::to_string(seen));
        }
    }

    const PromptShape shape = classify_prompt(req.prompt);
    Rng rng(util::derive_seed(behavior_.seed, {"mock", std::to_string(req.seed), req.prompt}));
    const std::vector<std::string> content = content_words(extract_document(req.prompt, shape));

    int words = behavior_.words_per_output;
    if (req.max_output_words > 0) words = std::min(words, req.max_output_words);

    switch (shape) {
    case PromptShape::strategies_task_agnostic:
        return make_strategy_blocks(rng, behavior_.strategies_per_proposal, content);
    case PromptShape::strategies_task_specific: {
        std::string out;
        for (int i = 0; i < behavior_.question_block_lines; ++i) {
            out += make_question(rng, content);
            out += '\n';
        }
        if (behavior_.emit_marker) {
            out += std::string(prompts::kStartStrategiesMarker);
            out += '\n';
        }
        out += make_strategy_blocks(rng, behavior_.strategies_per_proposal, content);
        return out;
    }
    case PromptShape::paraphrase:
    case PromptShape::apply_strategy:
        return make_prose(rng, words, content);
    case PromptShape::synth_qa: {
        std::string out;
        for (int i = 0; i < behavior_.qa_pairs_per_output; ++i) {
            if (i > 0) out += '\n';
            out += make_question(rng, content);
            out += ' ';
            out += make_prose(rng, static_cast<int>(rng.range(3, 7)), content);
        }
        return out;
    }
    case PromptShape::answerability_judge: {
        const std::string question = line_after(req.prompt, "Question: ");
        const std::string text = text_after(req.prompt, "Text:\n");
        for (const auto w : util::split_words(question)) {
            std::string word(w);
            while (!word.empty() && (word.back() == '?' || word.back() == '.')) word.pop_back();
            if (word.size() >= 5 && util::contains_folded(text, word)) return "YES";
        }
        return "NO";
    }
    case PromptShape::answer_grader: {
        const std::string gold = line_after(req.prompt, "Gold answer: ");
        const std::string candidate = text_after(req.prompt, "Candidate answer: ");
        if (util::trim(candidate).empty()) return "NOT_ATTEMPTED";
        return util::contains_folded(candidate, gold) ? "CORRECT" : "INCORRECT";
    }
    case PromptShape::qa_answer: {
        // Echo the question minus its mark; graders key off substrings, so
        // fixtures control correctness by planting gold answers.
        std::string q = last_nonempty_line(req.prompt);
        while (!q.empty() && (q.back() == '?' || q.back() == ' ')) q.pop_back();
        return q;
    }
    case PromptShape::unknown:
        break;
    }
    if (behavior_.fail_unknown) {
        throw TransportError(ErrorKind::protocol, "mock: unrecognized prompt shape");
    }
    return req.prompt;
}

// ---------------------------------------------------------------------------
// RemoteBackend
// ---------------------------------------------------------------------------

WireSchema wire_schema_from_string(std::string_view s) {
    if (s == "completion") return WireSchema::completion;
    if (s == "chat") return WireSchema::chat;
    throw Error("unknown wire schema: " + std::string(s));
}

RemoteBackend::RemoteBackend(RemoteConfig config) : config_(std::move(config)) {
    const std::size_t scheme = config_.url.find("://");
    if (scheme == std::string::npos) {
        throw Error("remote url must include a scheme: " + config_.url);
    }
    const std::size_t slash = config_.url.find('/', scheme + 3);
    if (slash == std::string::npos) {
        throw Error("remote url must include a path: " + config_.url);
    }
    host_base_ = config_.url.substr(0, slash);
    path_ = config_.url.substr(slash);
}

std::string RemoteBackend::model_id() const {
    return config_.model.empty() ? "remote" : config_.model;
}

std::string RemoteBackend::complete(const GenerationRequest& req) {
    httplib::Client client(host_base_);
    const auto timeout = std::chrono::duration<double>(config_.timeout_seconds);
    const auto secs = std::chrono::duration_cast<std::chrono::seconds>(timeout);
    client.set_connection_timeout(secs);
    client.set_read_timeout(secs);
    client.set_write_timeout(secs);

    httplib::Headers headers;
    if (!config_.api_key.empty()) {
        headers.emplace("Authorization", "Bearer " + config_.api_key);
    }

    ojson body;
    body["model"] = config_.model;
    if (config_.schema == WireSchema::chat) {
        body["messages"] = json::array({{{"role", "user"}, {"content", req.prompt}}});
    } else {
        body["prompt"] = req.prompt;
    }
    body["temperature"] = req.temperature;
    body["seed"] = req.seed;
    if (req.max_output_words > 0) {
        body["max_tokens"] = req.max_output_words * 2; // words-to-tokens headroom
    }

    httplib::Result res = client.Post(path_, headers, body.dump(), "application/json");
    if (!res) {
        const auto err = res.error();
        if (err == httplib::Error::ConnectionTimeout || err == httplib::Error::Read ||
            err == httplib::Error::Write) {
            throw TransportError(ErrorKind::timeout, "http: " + httplib::to_string(err));
        }
        throw TransportError(ErrorKind::connection, "http: " + httplib::to_string(err));
    }

    const int status = res->status;
    if (status == 401 || status == 403) {
        throw TransportError(ErrorKind::auth, "http status " + std::to_string(status));
    }
    if (status == 408) {
        throw TransportError(ErrorKind::timeout, "http status 408");
    }
    if (status == 429) {
        throw TransportError(ErrorKind::throttled, "http status 429");
    }
    if (status >= 500) {
        throw TransportError(ErrorKind::server, "http status " + std::to_string(status));
    }
    if (status != 200) {
        throw TransportError(ErrorKind::protocol, "http status " + std::to_string(status) + ": " +
                                                      res->body.substr(0, 200));
    }

    json parsed;
    try {
        parsed = json::parse(res->body);
    } catch (const json::exception& e) {
        throw TransportError(ErrorKind::malformed, std::string("bad response json: ") + e.what());
    }
    try {
        if (config_.schema == WireSchema::chat) {
            return parsed.at("choices").at(0).at("message").at("content").get<std::string>();
        }
        if (parsed.contains("choices")) {
            return parsed.at("choices").at(0).at("text").get<std::string>();
        }
        if (parsed.contains("text")) return parsed.at("text").get<std::string>();
        return parsed.at("completion").get<std::string>();
    } catch (const json::exception&) {
        throw TransportError(ErrorKind::malformed, "response missing completion text");
    }
}

} // namespace arpipe::backend
