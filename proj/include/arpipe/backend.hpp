#pragma once

#include "arpipe/util/jsonio.hpp"

#include <atomic>
#include <chrono>
#include <cstdint>
#include <deque>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace arpipe::backend {

struct GenerationRequest {
    std::string prompt;
    int max_output_words = 0; // 0 = no hint
    double temperature = 1.0;
    std::uint64_t seed = 0;
    std::string tag; // accounting label, unique per work unit
};

struct GenerationResult {
    std::string text;
    std::string prompt_hash;
    std::string model_id;
    int attempt_count = 1;
};

enum class ErrorKind {
    timeout,
    throttled,
    server,
    connection,
    unavailable,
    malformed,
    protocol,
    auth,
};

std::string_view to_string(ErrorKind kind);

/// timeouts, throttles, transient server/connection trouble: retry.
/// malformed responses: retry once (handled by the client). protocol and
/// auth errors: fail immediately.
bool is_retryable(ErrorKind kind);

/// Thrown by a transport for a single failed attempt.
class TransportError : public std::runtime_error {
public:
    TransportError(ErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind(kind) {}
    ErrorKind kind;
};

struct RequestError {
    ErrorKind last_kind = ErrorKind::server;
    std::string message;
    int attempt_count = 0;
    std::vector<std::string> attempt_log;
};

struct Outcome {
    std::optional<GenerationResult> result;
    std::optional<RequestError> error;
    bool ok() const { return result.has_value(); }
};

/// One completion attempt against some text source. Implementations must be
/// safe to call from many threads.
class TextBackend {
public:
    virtual ~TextBackend() = default;
    virtual std::string model_id() const = 0;
    virtual std::string complete(const GenerationRequest& req) = 0; // throws TransportError
};

struct BackendPolicy {
    int max_in_flight = 4;
    int max_attempts = 3;
    int requests_per_minute = 0; // 0 = unlimited
    double timeout_seconds = 120.0;
    int backoff_base_ms = 250; // exponential, with jitter; 0 disables sleeping
};

void validate(const BackendPolicy& policy);

/// Sliding-window limiter: at most `per_minute` acquisitions in any 60 s
/// window. Clock and sleep are injectable so the window logic is testable
/// without wall time.
class RateLimiter {
public:
    using TimePoint = std::chrono::steady_clock::time_point;
    using ClockFn = std::function<TimePoint()>;
    using SleepFn = std::function<void(std::chrono::milliseconds)>;

    explicit RateLimiter(int per_minute, ClockFn clock = {}, SleepFn sleep = {});
    void acquire();

private:
    int per_minute_;
    ClockFn clock_;
    SleepFn sleep_;
    std::mutex mu_;
    std::deque<TimePoint> window_;
};

/// One line per finished generation (success or failure).
struct CallRecord {
    std::string prompt_hash;
    std::string tag;
    std::string status; // "ok" or an ErrorKind name
    int attempt_count = 0;
    long long output_words = 0;
};

using CallSink = std::function<void(const CallRecord&)>;

/// Retry, rate-limit and concurrency layer over a TextBackend.
class BackendClient {
public:
    BackendClient(std::shared_ptr<TextBackend> transport, BackendPolicy policy,
                  CallSink call_sink = {});

    /// Retries per policy; throws Error when attempts are exhausted or the
    /// failure is non-retryable.
    GenerationResult generate(const GenerationRequest& req);

    /// Same retry behavior, error returned instead of thrown.
    Outcome try_generate(const GenerationRequest& req);

    /// Resolves every request exactly once, order preserved; at most
    /// max_in_flight requests are outstanding at any instant. Individual
    /// failures land in their slot, the batch itself never aborts.
    std::vector<Outcome> generate_batch(const std::vector<GenerationRequest>& reqs);

    const BackendPolicy& policy() const { return policy_; }
    std::string model_id() const { return transport_->model_id(); }

private:
    Outcome attempt_loop(const GenerationRequest& req);

    std::shared_ptr<TextBackend> transport_;
    BackendPolicy policy_;
    CallSink call_sink_;
    std::unique_ptr<RateLimiter> limiter_;
};

// ---------------------------------------------------------------------------
// Deterministic mock
// ---------------------------------------------------------------------------

/// Prompt shapes the mock knows how to answer. Detection is by the fixed
/// wording of the corresponding template.
enum class PromptShape {
    strategies_task_agnostic,
    strategies_task_specific,
    paraphrase,
    synth_qa,
    apply_strategy,
    answerability_judge,
    answer_grader,
    qa_answer,
    unknown,
};

PromptShape classify_prompt(std::string_view prompt);

struct MockBehavior {
    std::uint64_t seed = 0;
    std::string model_id = "mock-1";
    int strategies_per_proposal = 5;
    int question_block_lines = 3;
    bool emit_marker = true; // task-specific output includes <start_strategies>
    int qa_pairs_per_output = 8;
    int words_per_output = 120;
    bool fail_unknown = false; // unknown shape: echo the prompt (false) or fail (true)
    int latency_ms = 0;        // simulated per-call latency
    // Failure injection.
    std::string fail_substring; // prompts containing this fail with fail_substring_kind
    ErrorKind fail_substring_kind = ErrorKind::protocol;
    int fail_first_attempts = 0;   // per distinct prompt, then succeed
    long long fail_after_requests = -1; // global kill switch, -1 = off
};

MockBehavior mock_behavior_from_json(const json& j);

/// Output bytes are a pure function of (behavior, request seed, prompt), so
/// whole-pipeline runs are reproducible at any concurrency level. Output
/// shapes follow the same conventions the real parsers expect.
class MockBackend : public TextBackend {
public:
    explicit MockBackend(MockBehavior behavior);
    std::string model_id() const override { return behavior_.model_id; }
    std::string complete(const GenerationRequest& req) override;

    long long requests_served() const { return requests_.load(); }

private:
    MockBehavior behavior_;
    std::atomic<long long> requests_{0};
    std::mutex mu_;
    std::unordered_map<std::string, int> attempts_seen_; // prompt hash -> attempts
};

// ---------------------------------------------------------------------------
// Remote completion endpoint
// ---------------------------------------------------------------------------

enum class WireSchema { completion, chat };

WireSchema wire_schema_from_string(std::string_view s);

struct RemoteConfig {
    std::string url; // e.g. http://host:8000/v1/completions
    std::string model;
    std::string api_key;
    WireSchema schema = WireSchema::completion;
    double timeout_seconds = 120.0;
};

/// Single-turn completion over HTTP: prompt in, text out. The two wire
/// schemas cover the common completion and chat-completion layouts.
class RemoteBackend : public TextBackend {
public:
    explicit RemoteBackend(RemoteConfig config);
    std::string model_id() const override;
    std::string complete(const GenerationRequest& req) override;

private:
    RemoteConfig config_;
    std::string host_base_; // scheme://host:port
    std::string path_;
};

} // namespace arpipe::backend
