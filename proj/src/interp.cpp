#include "audiosae/interp.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <cstdio>
#include <limits>
#include <numeric>
#include <set>
#include <thread>

#include "httplib.h"

namespace audiosae::interp {

void check_aligned(const store::ShardManifest& mel, std::size_t mel_frames, const store::ShardManifest& activations,
                   std::size_t activation_frames) {
  if (mel.kind != "mel") throw ValidationError("mel shard manifest must have kind=mel");
  if (mel_frames != activation_frames) {
    throw ValidationError("mel shard has " + std::to_string(mel_frames) + " frames, activation shard has " +
                          std::to_string(activation_frames));
  }
  if (mel.segments.size() != activations.segments.size()) throw ValidationError("mel/activation audio counts differ");
  for (std::size_t i = 0; i < mel.segments.size(); ++i) {
    const auto& a = mel.segments[i];
    const auto& b = activations.segments[i];
    if (a.audio_id != b.audio_id || a.start != b.start || a.end != b.end) {
      throw ValidationError("mel/activation segmentation differs at audio '" + b.audio_id + "'");
    }
  }
}

MatrixD WindowAverage::masked_mean() const {
  MatrixD out = MatrixD::Zero(mean.rows(), mean.cols());
  for (Eigen::Index c = 0; c < mean.cols(); ++c) {
    const auto v = valid[static_cast<std::size_t>(c)];
    if (v > 0) out.col(c) = mean.col(c) * (static_cast<double>(windows) / static_cast<double>(v));
  }
  return out;
}

std::vector<std::size_t> top_audios(std::span<const float> activation, std::span<const FrameRange> audios,
                                    std::size_t n) {
  std::vector<float> peak(audios.size(), -std::numeric_limits<float>::infinity());
  for (std::size_t a = 0; a < audios.size(); ++a) {
    if (audios[a].end > activation.size()) throw ShapeError("audio range beyond activation length");
    for (std::size_t t = audios[a].start; t < audios[a].end; ++t) peak[a] = std::max(peak[a], activation[t]);
  }
  std::vector<std::size_t> order(audios.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) { return peak[x] > peak[y]; });
  order.resize(std::min(n, order.size()));
  return order;
}

WindowAverage mel_window_average(const MatrixF& mel, std::span<const float> activation,
                                 std::span<const FrameRange> audios, const MelWindowOptions& options) {
  if (static_cast<std::size_t>(mel.rows()) != activation.size()) throw ShapeError("mel/activation frame counts differ");
  if (!(options.window_seconds > 0.0) || !(options.frame_rate > 0.0)) throw ValidationError("window must be positive");
  const auto width = std::max<Eigen::Index>(1, std::lround(options.window_seconds * options.frame_rate));
  const auto half = width / 2;

  WindowAverage out;
  out.mean = MatrixD::Zero(mel.cols(), width);
  out.valid.assign(static_cast<std::size_t>(width), 0);
  out.audios = top_audios(activation, audios, options.top_n);
  const auto threshold = static_cast<float>(options.threshold);
  for (std::size_t a : out.audios) {
    const auto& r = audios[a];
    for (std::size_t t = r.start; t < r.end; ++t) {
      if (!(activation[t] > threshold)) continue;
      out.centres.push_back(t);
      for (Eigen::Index c = 0; c < width; ++c) {
        const auto f = static_cast<std::ptrdiff_t>(t) - half + c;
        if (f < static_cast<std::ptrdiff_t>(r.start) || f >= static_cast<std::ptrdiff_t>(r.end)) continue;
        out.mean.col(c) += mel.row(f).transpose().cast<double>();
        ++out.valid[static_cast<std::size_t>(c)];
      }
    }
  }
  out.windows = out.centres.size();
  if (out.windows == 0) throw ValidationError("mel_window_average: feature never activates in the selected audios");
  out.mean /= static_cast<double>(out.windows);
  return out;
}

// ---------------------------------------------------------------------------

std::size_t Chunk::frame_count() const {
  std::size_t n = 0;
  for (const auto& s : spans) n += s.size();
  return n;
}

std::vector<Chunk> chunk_active_frames(std::span<const float> activation,
                                       std::span<const store::AudioSegment> audios, const ChunkOptions& options) {
  if (!(options.threshold >= 0.0)) throw ValidationError("chunk threshold must be nonnegative");
  const auto per_chunk = static_cast<std::size_t>(std::max(1L, std::lround(options.chunk_seconds * options.frame_rate)));
  const auto threshold = static_cast<float>(options.threshold);
  std::vector<Chunk> out;
  for (std::size_t a = 0; a < audios.size(); ++a) {
    const auto& seg = audios[a];
    if (seg.end > activation.size()) throw ShapeError("audio range beyond activation length");
    Chunk cur;
    std::size_t index = 0;
    auto flush = [&] {
      if (cur.spans.empty()) return;
      cur.id = seg.audio_id + "#" + std::to_string(index++);
      cur.audio_id = seg.audio_id;
      cur.audio_index = a;
      out.push_back(std::move(cur));
      cur = Chunk{};
    };
    std::size_t filled = 0;
    for (std::size_t t = seg.start; t < seg.end; ++t) {
      if (!(activation[t] > threshold)) continue;
      if (!cur.spans.empty() && cur.spans.back().end == t) {
        ++cur.spans.back().end;
      } else {
        cur.spans.push_back({t, t + 1});
      }
      if (++filled == per_chunk) {
        flush();
        filled = 0;
      }
    }
    flush();
  }
  return out;
}

nlohmann::json to_json(const Chunk& chunk, const store::AudioSegment& audio, double frame_rate) {
  nlohmann::json spans = nlohmann::json::array();
  for (const auto& s : chunk.spans) {
    spans.push_back({static_cast<double>(s.start - audio.start) / frame_rate,
                     static_cast<double>(s.end - audio.start) / frame_rate});
  }
  return {{"id", chunk.id}, {"audio_id", chunk.audio_id}, {"spans", spans},
          {"duration", static_cast<double>(chunk.frame_count()) / frame_rate}};
}

// ---------------------------------------------------------------------------

Endpoint Endpoint::parse(const std::string& url, const std::string& token) {
  Endpoint e;
  e.token = token;
  const auto scheme_end = url.find("://");
  if (scheme_end == std::string::npos) throw ValidationError("endpoint URL needs a scheme: " + url);
  e.scheme = url.substr(0, scheme_end);
  if (e.scheme != "http") throw ValidationError("only http endpoints are supported: " + url);
  auto rest = url.substr(scheme_end + 3);
  const auto slash = rest.find('/');
  e.path = slash == std::string::npos ? "/" : rest.substr(slash);
  rest = rest.substr(0, slash);
  const auto colon = rest.rfind(':');
  if (colon != std::string::npos) {
    try {
      e.port = std::stoi(rest.substr(colon + 1));
    } catch (const std::exception&) {
      throw ValidationError("bad port in endpoint URL: " + url);
    }
    rest = rest.substr(0, colon);
  }
  if (rest.empty()) throw ValidationError("endpoint URL has no host: " + url);
  e.host = rest;
  return e;
}

std::optional<Endpoint> Endpoint::from_env(const char* url_variable) {
  const char* url = std::getenv(url_variable);
  if (url == nullptr || *url == '\0') return std::nullopt;
  const char* token = std::getenv("API_TOKEN");
  return parse(url, token ? token : "");
}

std::string request_id(const std::string& scope, const nlohmann::json& body) {
  // FNV-1a over scope and canonical JSON.
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const std::string& s) {
    for (unsigned char c : s) {
      h ^= c;
      h *= 1099511628211ULL;
    }
  };
  mix(scope);
  mix("\n");
  mix(body.dump());
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return scope + "-" + buf;
}

nlohmann::json post_json(const Endpoint& endpoint, const nlohmann::json& body, const std::string& request_id,
                         const RetryPolicy& policy) {
  if (policy.attempts < 1) throw ValidationError("retry policy needs at least one attempt");
  httplib::Client client(endpoint.host, endpoint.port);
  client.set_connection_timeout(policy.timeout);
  client.set_read_timeout(policy.timeout);
  client.set_write_timeout(policy.timeout);
  httplib::Headers headers{{"Idempotency-Key", request_id}};
  if (!endpoint.token.empty()) headers.emplace("Authorization", "Bearer " + endpoint.token);
  const std::string payload = body.dump();

  auto backoff = policy.initial_backoff;
  std::string last_error;
  for (int attempt = 1; attempt <= policy.attempts; ++attempt) {
    const auto res = client.Post(endpoint.path, headers, payload, "application/json");
    if (res) {
      if (res->status >= 200 && res->status < 300) {
        try {
          return nlohmann::json::parse(res->body);
        } catch (const nlohmann::json::exception& e) {
          throw RuntimeFailure("malformed JSON from " + endpoint.host + endpoint.path + ": " + e.what());
        }
      }
      last_error = "HTTP " + std::to_string(res->status);
      if (res->status != 429 && res->status < 500) {
        throw RuntimeFailure(endpoint.host + endpoint.path + " rejected request: " + last_error);
      }
    } else {
      last_error = httplib::to_string(res.error());
    }
    if (attempt < policy.attempts) {
      std::this_thread::sleep_for(backoff);
      backoff = std::chrono::milliseconds(static_cast<long long>(static_cast<double>(backoff.count()) * policy.multiplier));
    }
  }
  throw RuntimeFailure(endpoint.host + endpoint.path + " failed after " + std::to_string(policy.attempts) +
                       " attempts: " + last_error);
}

std::vector<std::string> caption_chunks(const Endpoint& endpoint, const std::vector<nlohmann::json>& chunks,
                                        const CaptionerOptions& options) {
  if (chunks.empty()) return {};
  const std::size_t batch = std::max<std::size_t>(1, options.batch_size);
  const std::size_t batches = (chunks.size() + batch - 1) / batch;
  std::vector<std::string> captions(chunks.size());
  parallel_for(batches, std::max<std::size_t>(1, options.parallelism), [&](std::size_t b) {
    const std::size_t lo = b * batch;
    const std::size_t hi = std::min(chunks.size(), lo + batch);
    nlohmann::json body{{"chunks", nlohmann::json::array()}};
    for (std::size_t i = lo; i < hi; ++i) body["chunks"].push_back(chunks[i]);
    const auto id = request_id("caption", body);
    body["request_id"] = id;
    const auto reply = post_json(endpoint, body, id, options.retry);
    if (!reply.is_object() || !reply.contains("captions") || !reply["captions"].is_array() ||
        reply["captions"].size() != hi - lo) {
      throw RuntimeFailure("captioner reply must hold one caption per chunk");
    }
    for (std::size_t i = lo; i < hi; ++i) {
      const auto& c = reply["captions"][i - lo];
      if (!c.is_string()) throw RuntimeFailure("captioner returned a non-string caption");
      captions[i] = c.get<std::string>();
    }
  });
  return captions;
}

std::string aggregation_prompt(std::span<const std::string> captions) {
  std::string p =
      "The following captions describe short audio segments where one learned feature is active. "
      "Give one short description of what they have in common.\n";
  for (std::size_t i = 0; i < captions.size(); ++i) p += std::to_string(i + 1) + ". " + captions[i] + "\n";
  return p;
}

std::string aggregate_captions(const Endpoint& endpoint, const std::string& feature,
                               std::span<const std::string> captions, const RetryPolicy& policy) {
  if (captions.empty()) throw ValidationError("aggregate_captions: no captions for feature " + feature);
  nlohmann::json body{{"feature", feature},
                      {"prompt", aggregation_prompt(captions)},
                      {"captions", std::vector<std::string>(captions.begin(), captions.end())}};
  const auto id = request_id("aggregate", body);
  body["request_id"] = id;
  const auto reply = post_json(endpoint, body, id, policy);
  if (!reply.is_object() || !reply.contains("label") || !reply["label"].is_string()) {
    throw RuntimeFailure("aggregator reply lacks a string 'label'");
  }
  return reply["label"].get<std::string>();
}

nlohmann::json to_json(const FeatureInterpretation& f) {
  return {{"feature", f.feature}, {"chunks", f.chunks}, {"captions", f.captions}, {"label", f.label}};
}

std::map<std::string, std::size_t> word_frequencies(std::span<const std::string> texts) {
  static const std::set<std::string> stop{"a",  "an", "the", "is",  "are", "was", "of",   "and", "or",   "in",
                                          "on", "to", "with", "at", "by",  "for", "from", "it",  "its",  "this",
                                          "that", "be", "as", "some", "there", "being", "while"};
  std::map<std::string, std::size_t> counts;
  for (const auto& text : texts) {
    std::string word;
    auto flush = [&] {
      if (!word.empty() && !stop.contains(word)) ++counts[word];
      word.clear();
    };
    for (unsigned char c : text) {
      if (std::isalnum(c) || c == '\'') {
        word.push_back(static_cast<char>(std::tolower(c)));
      } else {
        flush();
      }
    }
    flush();
  }
  return counts;
}

}  // namespace audiosae::interp
