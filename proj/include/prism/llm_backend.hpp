#pragma once

#include <atomic>
#include <chrono>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <semaphore>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "prism/memory.hpp"
#include "prism/problem.hpp"
#include "prism/prm.hpp"
#include "prism/search.hpp"

// Policy and PRM backends over an OpenAI-compatible chat-completions API.
namespace prism::llm {

inline constexpr int kMaxRetriesCap = 5;

struct EndpointConfig {
  std::string base_url = "http://127.0.0.1:8000/v1";
  std::string model_name = "gpt-4.1-mini";
  std::string api_key_env = "PRISM_API_KEY";  // name of the variable, never its value
  double timeout_s = 60.0;
  int max_retries = 2;
  double temperature = 0.7;
  int max_parallel = 4;
  int max_tokens = 512;
  int backoff_initial_ms = 250;
  int backoff_max_ms = 8000;

  void validate() const;
  nlohmann::ordered_json to_json() const;
  static EndpointConfig from_json(const nlohmann::json& j);
};

enum class ExpectedFormat { step_list, class_label };

struct PromptBundle {
  std::string system_text;
  std::string user_text;
  ExpectedFormat expected_format = ExpectedFormat::step_list;
};

// Versioned prompt templates loaded from a directory holding
// generate.system.txt, generate.user.txt, score.system.txt, score.user.txt and
// VERSION. Placeholders use {{name}} syntax.
class PromptTemplates {
 public:
  static PromptTemplates load(const std::filesystem::path& dir);
  // Directory compiled into the library (repo prompts/v1), overridable with
  // the PRISM_PROMPT_DIR environment variable.
  static PromptTemplates load_default();

  const std::string& version() const noexcept { return version_; }

  PromptBundle render_generate(const Problem& problem, std::span<const std::string> prefix,
                               const MemoryDigest& digest, int n) const;
  PromptBundle render_score(const Problem& problem, std::span<const std::string> prefix,
                            const std::string& candidate) const;

 private:
  std::string version_;
  std::map<std::string, std::string> files_;
};

// Replaces {{key}} occurrences; unknown placeholders are left as is.
std::string render(std::string text, const std::map<std::string, std::string>& vars);

struct HttpReply {
  int status = 0;  // 0: transport failure, see `error`
  std::string body;
  std::string error;
};

using Headers = std::vector<std::pair<std::string, std::string>>;

class Transport {
 public:
  virtual ~Transport() = default;
  virtual HttpReply post(const std::string& path, const std::string& body,
                         const Headers& headers) = 0;
};

// cpp-httplib client for `origin` (scheme://host[:port]).
class HttpTransport final : public Transport {
 public:
  HttpTransport(std::string origin, double timeout_s);
  HttpReply post(const std::string& path, const std::string& body, const Headers& headers) override;

 private:
  std::string origin_;
  double timeout_s_;
};

// Replays recorded replies in order and records every request it receives.
class FixtureTransport final : public Transport {
 public:
  explicit FixtureTransport(std::vector<HttpReply> replies);
  // Loads `<name>.response.json` (the raw reply body, status 200) for each name.
  static std::shared_ptr<FixtureTransport> from_files(const std::filesystem::path& dir,
                                                      const std::vector<std::string>& names);

  HttpReply post(const std::string& path, const std::string& body, const Headers& headers) override;

  struct Recorded {
    std::string path;
    std::string body;
    Headers headers;
  };
  std::vector<Recorded> requests() const;

 private:
  mutable std::mutex mu_;
  std::vector<HttpReply> replies_;
  std::size_t next_ = 0;
  std::vector<Recorded> requests_;
};

// scheme://host[:port] and path prefix of a base URL.
std::pair<std::string, std::string> split_base_url(const std::string& base_url);

// {model, messages, temperature, max_tokens} in that key order.
std::string build_request_body(const EndpointConfig& cfg, const PromptBundle& prompt);

// Replaces every occurrence of `secret` with "***".
std::string redact(std::string text, const std::string& secret);

// Extracts choices[0].message.content; ParseError carries the raw body.
std::string parse_completion(const std::string& body);

// Contents of <step>...</step> blocks; ParseError if there are none.
std::vector<std::string> parse_step_list(const std::string& content);

// Exactly one distinct class name, matched case-insensitively as a word.
// Zero or several names raise ParseError.
ValueClass parse_class_label(const std::string& content);

using Sleeper = std::function<void(std::chrono::milliseconds)>;

// Thread-safe chat client: at most max_parallel requests in flight, and at most
// max_retries + 1 attempts per call with exponential backoff on transport
// errors, 429 and 5xx.
class ChatClient {
 public:
  ChatClient(EndpointConfig cfg, std::shared_ptr<Transport> transport, Sleeper sleeper = {});

  // Returns the assistant message content.
  std::string complete(const PromptBundle& prompt);

  const EndpointConfig& config() const noexcept { return cfg_; }
  // Backoff delay before retry number `retry` (0-based).
  std::chrono::milliseconds backoff_delay(int retry) const;

 private:
  EndpointConfig cfg_;
  std::shared_ptr<Transport> transport_;
  Sleeper sleeper_;
  std::string path_;
  std::counting_semaphore<1024> slots_;
};

std::vector<std::string> generate_candidates(ChatClient& client, const PromptTemplates& templates,
                                             const Problem& problem,
                                             std::span<const std::string> prefix,
                                             const MemoryDigest& digest, int n);

ValueClass score_class(ChatClient& client, const PromptTemplates& templates, const Problem& problem,
                       std::span<const std::string> prefix, const std::string& candidate);

// Marker the generation prompt asks the model to put before a final answer.
inline constexpr std::string_view kAnswerMarker = "ANSWER:";

class RemotePolicy final : public PolicyBackend {
 public:
  RemotePolicy(std::shared_ptr<ChatClient> client, PromptTemplates templates);
  Proposal propose(const ExpansionRequest& request) override;
  bool is_terminal(const Problem& problem, std::span<const std::string> path) override;
  std::string extract_answer(const Problem& problem, std::span<const std::string> path) override;

 private:
  std::shared_ptr<ChatClient> client_;
  PromptTemplates templates_;
};

// Unparseable class replies fall back to Fair and are counted.
class RemotePrm final : public PrmBackend {
 public:
  RemotePrm(std::shared_ptr<ChatClient> client, PromptTemplates templates);
  PrmScore score(const Problem& problem, std::span<const std::string> prefix,
                 const std::string& candidate) override;
  int fallbacks() const noexcept { return fallbacks_.load(); }

 private:
  std::shared_ptr<ChatClient> client_;
  PromptTemplates templates_;
  std::atomic<int> fallbacks_{0};
};

}  // namespace prism::llm
