// Copyright 2026 The triedit Authors
// SPDX-License-Identifier: Apache-2.0
#pragma once

// HTTP facade over one scene. Bodies are JSON; images travel as base64 PNG
// strings. Errors come back as {"error": {"code": ..., "message": ...}} with
// 404 (unknown resource), 409 (conflict or wrong state), 410 (stale context
// provenance), 422 (schema violation) or 500 (numerical failure).
//
// Mutating requests are serialized through one command lock. Renders only
// copy the published snapshot under a short lock, so they never wait for a
// training job. A request carrying an Idempotency-Key header is answered
// from a replay cache when the key has been seen with the same request.

#include <cstdint>
#include <map>
#include <memory>
#include <string>

namespace triedit {

struct ServiceOptions {
  std::string manifest;
  std::string checkpoint;
  int samples_per_ray = 128;
  int workers = 0;
  uint64_t seed = 0;
  /// Session nonce for context provenance; 0 draws one at startup.
  uint64_t nonce = 0;
  std::string cors_origin = "*";
  /// Probe points used to calibrate the selection threshold.
  int distance_probes = 8192;
  /// Snapshots kept for GET /checkpoint; the active one is never evicted.
  int max_snapshots = 16;
  /// Iterations between snapshot publications of running jobs.
  int publish_every = 250;
};

struct HttpRequest {
  std::string method;
  std::string path;
  std::string body;
  std::map<std::string, std::string> headers;
};

struct HttpResponse {
  int status = 200;
  std::string content_type = "application/json";
  std::string body;
  std::map<std::string, std::string> headers;
};

class EditService {
 public:
  explicit EditService(ServiceOptions options);
  ~EditService();
  EditService(const EditService&) = delete;
  EditService& operator=(const EditService&) = delete;

  /// Routes one request. Thread-safe.
  HttpResponse handle(const HttpRequest& request);

  /// Binds the HTTP server; port 0 picks a free port. Returns the port.
  int bind(const std::string& host, int port);
  /// Serves until stop(). Requires bind().
  void serve();
  void stop();

  /// Blocks until no job is queued or running.
  void wait_for_jobs();

 private:
  struct State;
  std::unique_ptr<State> state_;
};

}  // namespace triedit
