#include "prism/llm_backend.hpp"

#include <algorithm>
#include <cctype>
#include <cstdlib>
#include <fstream>
#include <iostream>
#include <regex>
#include <set>
#include <sstream>
#include <thread>

#include <httplib.h>

#include "prism/errors.hpp"

namespace prism::llm {

// ---------------------------------------------------------------------------
// Config

void EndpointConfig::validate() const {
  if (base_url.rfind("http://", 0) != 0 && base_url.rfind("https://", 0) != 0) {
    throw DomainError("base_url must start with http:// or https://");
  }
  if (model_name.empty()) throw DomainError("model_name is empty");
  if (!(timeout_s > 0.0)) throw DomainError("timeout must be positive");
  if (max_retries < 0 || max_retries > kMaxRetriesCap) {
    throw DomainError("max_retries must lie in [0," + std::to_string(kMaxRetriesCap) + "]");
  }
  if (!(temperature >= 0.0)) throw DomainError("temperature must be >= 0");
  if (max_parallel < 1 || max_parallel > 1024) throw DomainError("max_parallel must lie in [1,1024]");
  if (max_tokens < 1) throw DomainError("max_tokens must be positive");
  if (backoff_initial_ms < 0 || backoff_max_ms < backoff_initial_ms) {
    throw DomainError("invalid backoff bounds");
  }
}

nlohmann::ordered_json EndpointConfig::to_json() const {
  nlohmann::ordered_json j;
  j["base_url"] = base_url;
  j["model_name"] = model_name;
  j["api_key_env"] = api_key_env;
  j["timeout_s"] = timeout_s;
  j["max_retries"] = max_retries;
  j["temperature"] = temperature;
  j["max_parallel"] = max_parallel;
  j["max_tokens"] = max_tokens;
  j["backoff_initial_ms"] = backoff_initial_ms;
  j["backoff_max_ms"] = backoff_max_ms;
  return j;
}

EndpointConfig EndpointConfig::from_json(const nlohmann::json& j) {
  EndpointConfig c;
  c.base_url = j.value("base_url", c.base_url);
  c.model_name = j.value("model_name", c.model_name);
  c.api_key_env = j.value("api_key_env", c.api_key_env);
  c.timeout_s = j.value("timeout_s", c.timeout_s);
  c.max_retries = j.value("max_retries", c.max_retries);
  c.temperature = j.value("temperature", c.temperature);
  c.max_parallel = j.value("max_parallel", c.max_parallel);
  c.max_tokens = j.value("max_tokens", c.max_tokens);
  c.backoff_initial_ms = j.value("backoff_initial_ms", c.backoff_initial_ms);
  c.backoff_max_ms = j.value("backoff_max_ms", c.backoff_max_ms);
  c.validate();
  return c;
}

// ---------------------------------------------------------------------------
// Prompts

namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw IoError("cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

std::string trim(std::string s) {
  auto not_space = [](unsigned char c) { return !std::isspace(c); };
  s.erase(s.begin(), std::find_if(s.begin(), s.end(), not_space));
  s.erase(std::find_if(s.rbegin(), s.rend(), not_space).base(), s.end());
  return s;
}

std::string numbered(std::span<const std::string> items, const std::string& empty) {
  if (items.empty()) return empty;
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += '\n';
    out += std::to_string(i + 1) + ". " + items[i];
  }
  return out;
}

std::string bulleted(const std::vector<std::string>& items, const std::string& empty) {
  if (items.empty()) return empty;
  std::string out;
  for (std::size_t i = 0; i < items.size(); ++i) {
    if (i) out += '\n';
    out += "- " + items[i];
  }
  return out;
}

constexpr const char* kTemplateFiles[] = {"generate.system.txt", "generate.user.txt",
                                          "score.system.txt", "score.user.txt"};

}  // namespace

std::string render(std::string text, const std::map<std::string, std::string>& vars) {
  for (const auto& [key, value] : vars) {
    const std::string placeholder = "{{" + key + "}}";
    for (std::size_t pos = text.find(placeholder); pos != std::string::npos;
         pos = text.find(placeholder, pos + value.size())) {
      text.replace(pos, placeholder.size(), value);
    }
  }
  return text;
}

PromptTemplates PromptTemplates::load(const std::filesystem::path& dir) {
  PromptTemplates t;
  t.version_ = trim(read_file(dir / "VERSION"));
  for (const char* name : kTemplateFiles) t.files_[name] = read_file(dir / name);
  return t;
}

PromptTemplates PromptTemplates::load_default() {
  if (const char* env = std::getenv("PRISM_PROMPT_DIR"); env && *env) return load(env);
#ifdef PRISM_PROMPT_DIR
  return load(PRISM_PROMPT_DIR);
#else
  throw IoError("no prompt directory configured; set PRISM_PROMPT_DIR");
#endif
}

PromptBundle PromptTemplates::render_generate(const Problem& problem,
                                              std::span<const std::string> prefix,
                                              const MemoryDigest& digest, int n) const {
  std::vector<std::string> avoid(digest.fallacy_blocklist.begin(), digest.fallacy_blocklist.end());
  std::map<std::string, std::string> vars{
      {"problem", problem.statement},
      {"steps", numbered(prefix, "(no steps yet)")},
      {"hints", bulleted(digest.heuristic_hints, "(none)")},
      {"avoid", bulleted(avoid, "(none)")},
      {"n", std::to_string(n)},
      {"answer_marker", std::string(kAnswerMarker)},
  };
  return {render(files_.at("generate.system.txt"), vars), render(files_.at("generate.user.txt"), vars),
          ExpectedFormat::step_list};
}

PromptBundle PromptTemplates::render_score(const Problem& problem, std::span<const std::string> prefix,
                                           const std::string& candidate) const {
  std::map<std::string, std::string> vars{
      {"problem", problem.statement},
      {"steps", numbered(prefix, "(no steps yet)")},
      {"candidate", candidate},
  };
  return {render(files_.at("score.system.txt"), vars), render(files_.at("score.user.txt"), vars),
          ExpectedFormat::class_label};
}

// ---------------------------------------------------------------------------
// Transports

std::pair<std::string, std::string> split_base_url(const std::string& base_url) {
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos) throw DomainError("base_url lacks a scheme: " + base_url);
  const auto path_start = base_url.find('/', scheme_end + 3);
  std::string origin = base_url.substr(0, path_start);
  std::string path = path_start == std::string::npos ? "" : base_url.substr(path_start);
  while (!path.empty() && path.back() == '/') path.pop_back();
  return {origin, path};
}

HttpTransport::HttpTransport(std::string origin, double timeout_s)
    : origin_(std::move(origin)), timeout_s_(timeout_s) {}

HttpReply HttpTransport::post(const std::string& path, const std::string& body,
                              const Headers& headers) {
  httplib::Client cli(origin_);
  const auto secs = static_cast<time_t>(timeout_s_);
  const auto usecs = static_cast<time_t>((timeout_s_ - static_cast<double>(secs)) * 1e6);
  cli.set_connection_timeout(secs, usecs);
  cli.set_read_timeout(secs, usecs);
  cli.set_write_timeout(secs, usecs);
  httplib::Headers h;
  for (const auto& [k, v] : headers) h.emplace(k, v);
  auto res = cli.Post(path, h, body, "application/json");
  if (!res) return {0, {}, httplib::to_string(res.error())};
  return {res->status, res->body, {}};
}

FixtureTransport::FixtureTransport(std::vector<HttpReply> replies) : replies_(std::move(replies)) {}

std::shared_ptr<FixtureTransport> FixtureTransport::from_files(
    const std::filesystem::path& dir, const std::vector<std::string>& names) {
  std::vector<HttpReply> replies;
  for (const auto& n : names) replies.push_back({200, read_file(dir / (n + ".response.json")), {}});
  return std::make_shared<FixtureTransport>(std::move(replies));
}

HttpReply FixtureTransport::post(const std::string& path, const std::string& body,
                                 const Headers& headers) {
  std::lock_guard lock(mu_);
  requests_.push_back({path, body, headers});
  if (next_ >= replies_.size()) return {0, {}, "fixture exhausted"};
  return replies_[next_++];
}

std::vector<FixtureTransport::Recorded> FixtureTransport::requests() const {
  std::lock_guard lock(mu_);
  return requests_;
}

// ---------------------------------------------------------------------------
// Wire format

std::string build_request_body(const EndpointConfig& cfg, const PromptBundle& prompt) {
  nlohmann::ordered_json j;
  j["model"] = cfg.model_name;
  j["messages"] = nlohmann::ordered_json::array(
      {nlohmann::ordered_json{{"role", "system"}, {"content", prompt.system_text}},
       nlohmann::ordered_json{{"role", "user"}, {"content", prompt.user_text}}});
  j["temperature"] = cfg.temperature;
  j["max_tokens"] = cfg.max_tokens;
  return j.dump();
}

std::string redact(std::string text, const std::string& secret) {
  if (secret.empty()) return text;
  for (auto pos = text.find(secret); pos != std::string::npos; pos = text.find(secret, pos + 3)) {
    text.replace(pos, secret.size(), "***");
  }
  return text;
}

std::string parse_completion(const std::string& body) {
  nlohmann::json j = nlohmann::json::parse(body, nullptr, /*allow_exceptions=*/false);
  if (j.is_discarded()) throw ParseError("completion body is not JSON", body);
  try {
    return j.at("choices").at(0).at("message").at("content").get<std::string>();
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("completion body lacks choices[0].message.content: ") + e.what(),
                     body);
  }
}

std::vector<std::string> parse_step_list(const std::string& content) {
  static const std::regex step_re(R"(<step>([\s\S]*?)</step>)", std::regex::icase);
  std::vector<std::string> out;
  for (auto it = std::sregex_iterator(content.begin(), content.end(), step_re);
       it != std::sregex_iterator(); ++it) {
    std::string s = trim((*it)[1].str());
    if (!s.empty()) out.push_back(std::move(s));
  }
  if (out.empty()) throw ParseError("reply contains no <step> blocks", content);
  return out;
}

ValueClass parse_class_label(const std::string& content) {
  std::string lower;
  lower.reserve(content.size());
  for (unsigned char c : content) lower.push_back(static_cast<char>(std::tolower(c)));
  std::set<ValueClass> found;
  for (ValueClass c : kAllClasses) {
    std::string name(class_name(c));
    for (auto& ch : name) ch = static_cast<char>(std::tolower(static_cast<unsigned char>(ch)));
    for (auto pos = lower.find(name); pos != std::string::npos; pos = lower.find(name, pos + 1)) {
      const bool left_ok = pos == 0 || !std::isalpha(static_cast<unsigned char>(lower[pos - 1]));
      const auto end = pos + name.size();
      const bool right_ok = end >= lower.size() || !std::isalpha(static_cast<unsigned char>(lower[end]));
      if (left_ok && right_ok) {
        found.insert(c);
        break;
      }
    }
  }
  if (found.size() != 1) {
    throw ParseError(found.empty() ? "reply names no value class" : "reply names several value classes",
                     content);
  }
  return *found.begin();
}

// ---------------------------------------------------------------------------
// Client

ChatClient::ChatClient(EndpointConfig cfg, std::shared_ptr<Transport> transport, Sleeper sleeper)
    : cfg_(std::move(cfg)),
      transport_(std::move(transport)),
      sleeper_(std::move(sleeper)),
      slots_(0) {
  cfg_.validate();
  if (!transport_) {
    transport_ = std::make_shared<HttpTransport>(split_base_url(cfg_.base_url).first, cfg_.timeout_s);
  }
  if (!sleeper_) sleeper_ = [](std::chrono::milliseconds d) { std::this_thread::sleep_for(d); };
  path_ = split_base_url(cfg_.base_url).second + "/chat/completions";
  slots_.release(cfg_.max_parallel);
}

std::chrono::milliseconds ChatClient::backoff_delay(int retry) const {
  long long d = cfg_.backoff_initial_ms;
  for (int i = 0; i < retry && d < cfg_.backoff_max_ms; ++i) d *= 2;
  return std::chrono::milliseconds(std::min<long long>(d, cfg_.backoff_max_ms));
}

std::string ChatClient::complete(const PromptBundle& prompt) {
  const std::string body = build_request_body(cfg_, prompt);
  std::string key;
  if (const char* env = std::getenv(cfg_.api_key_env.c_str()); env) key = env;
  Headers headers{{"Content-Type", "application/json"}};
  if (!key.empty()) headers.emplace_back("Authorization", "Bearer " + key);

  std::string last_error;
  for (int attempt = 0; attempt <= cfg_.max_retries; ++attempt) {
    if (attempt > 0) sleeper_(backoff_delay(attempt - 1));
    HttpReply reply;
    {
      slots_.acquire();
      try {
        reply = transport_->post(path_, body, headers);
      } catch (...) {
        slots_.release();
        throw;
      }
      slots_.release();
    }
    if (reply.status == 200) return parse_completion(reply.body);
    last_error = reply.status == 0 ? "transport error: " + reply.error
                                   : "HTTP " + std::to_string(reply.status);
    last_error = redact(last_error, key);
    const bool retryable = reply.status == 0 || reply.status == 429 || reply.status >= 500;
    if (!retryable) break;
  }
  throw BackendError("chat completion failed after retries: " + last_error);
}

// ---------------------------------------------------------------------------
// Operations

std::vector<std::string> generate_candidates(ChatClient& client, const PromptTemplates& templates,
                                             const Problem& problem,
                                             std::span<const std::string> prefix,
                                             const MemoryDigest& digest, int n) {
  if (n < 1) throw DomainError("generate_candidates: n must be positive");
  const std::string content = client.complete(templates.render_generate(problem, prefix, digest, n));
  std::vector<std::string> out;
  std::set<std::string> seen;
  for (auto& step : parse_step_list(content)) {
    if (static_cast<int>(out.size()) >= n) break;
    if (is_blocked(digest, step)) continue;
    if (!seen.insert(normalize_key(step)).second) continue;
    out.push_back(std::move(step));
  }
  return out;
}

ValueClass score_class(ChatClient& client, const PromptTemplates& templates, const Problem& problem,
                       std::span<const std::string> prefix, const std::string& candidate) {
  return parse_class_label(client.complete(templates.render_score(problem, prefix, candidate)));
}

RemotePolicy::RemotePolicy(std::shared_ptr<ChatClient> client, PromptTemplates templates)
    : client_(std::move(client)), templates_(std::move(templates)) {}

Proposal RemotePolicy::propose(const ExpansionRequest& req) {
  auto steps = generate_candidates(*client_, templates_, req.problem, req.prefix, req.digest,
                                   std::max(req.max_candidates, 1));
  std::set<std::string> existing;
  for (const auto& e : req.existing) existing.insert(normalize_key(e));
  std::erase_if(steps, [&](const std::string& s) { return existing.contains(normalize_key(s)); });
  Proposal p;
  // A model can always be sampled again; only an empty reply ends expansion.
  p.exhausted = steps.empty();
  p.steps = std::move(steps);
  return p;
}

namespace {

std::size_t find_marker(const std::string& step) {
  std::string upper;
  upper.reserve(step.size());
  for (unsigned char c : step) upper.push_back(static_cast<char>(std::toupper(c)));
  return upper.rfind(kAnswerMarker);
}

}  // namespace

bool RemotePolicy::is_terminal(const Problem&, std::span<const std::string> path) {
  return !path.empty() && find_marker(path.back()) != std::string::npos;
}

std::string RemotePolicy::extract_answer(const Problem&, std::span<const std::string> path) {
  if (path.empty()) return {};
  const std::string& last = path.back();
  const auto pos = find_marker(last);
  if (pos == std::string::npos) return {};
  return trim(last.substr(pos + kAnswerMarker.size()));
}

RemotePrm::RemotePrm(std::shared_ptr<ChatClient> client, PromptTemplates templates)
    : client_(std::move(client)), templates_(std::move(templates)) {}

PrmScore RemotePrm::score(const Problem& problem, std::span<const std::string> prefix,
                          const std::string& candidate) {
  try {
    return PrmScore::from_class(score_class(*client_, templates_, problem, prefix, candidate));
  } catch (const ParseError& e) {
    ++fallbacks_;
    std::clog << "[prism] class reply not understood (" << e.what() << "); scoring as Fair\n";
    return PrmScore::from_class(ValueClass::Fair);
  }
}

}  // namespace prism::llm
