#pragma once

// HTTP service: classification of uploads plus per-session exploration (feature maps,
// explanations, e-mailed reports). Sessions live on disk and expire after a TTL.

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "gaitworks/classifier.hpp"

namespace httplib {
class Server;
}

namespace gaitworks {

class ServiceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ServiceConfig {
  std::string host = "0.0.0.0";
  int port = 8080;
  std::filesystem::path model_gei;
  std::filesystem::path model_sei;
  std::chrono::seconds session_ttl{3600};
  std::size_t max_upload_bytes = 64u << 20;
  std::string smtp_url;  // empty: reports disabled
  std::string mail_from = "gaitworks@localhost";
  /// External decoder for uploads that are neither PNG nor ZIP. "{input}" and "{output}" are
  /// replaced by the upload path and a directory that must receive numbered PNG frames.
  std::string decoder_cmd;
  std::filesystem::path session_dir;  // empty: <temp>/gaitworks-sessions
  std::size_t threads = 8;

  /// GAITWORKS_PORT, GAITWORKS_MODEL_GEI, GAITWORKS_MODEL_SEI, GAITWORKS_SESSION_TTL_SECS,
  /// GAITWORKS_MAX_UPLOAD_MB, GAITWORKS_SMTP_URL, GAITWORKS_DECODER_CMD. Throws ServiceError on
  /// malformed values.
  static ServiceConfig from_env();
};

struct MailMessage {
  std::string from;
  std::vector<std::string> to;
  std::string subject;
  std::string text;
  struct Attachment {
    std::string filename;
    std::string content_type;
    std::vector<std::uint8_t> data;
  };
  std::vector<Attachment> attachments;

  /// RFC 5322 message with a MIME multipart body; attachments are base64 encoded.
  std::string to_mime(const std::string& boundary = "gaitworks-boundary") const;
};

/// Outbound mail transport.
class Mailer {
 public:
  virtual ~Mailer() = default;
  /// Throws ServiceError when delivery fails.
  virtual void send(const MailMessage& message) = 0;
};

/// SMTP through libcurl; `url` is smtp://host[:port] or smtps://.
std::unique_ptr<Mailer> make_smtp_mailer(const std::string& url);

/// Syntax check for a single addr-spec (local@domain); no DNS lookups.
bool valid_email(const std::string& address);

class Service {
 public:
  /// Loads the configured models; throws ServiceError when none is configured or loadable.
  explicit Service(ServiceConfig config, std::unique_ptr<Mailer> mailer = nullptr);
  /// Uses models already in memory (either may be absent, not both).
  Service(ServiceConfig config, std::optional<Model> gei_model, std::optional<Model> sei_model,
          std::unique_ptr<Mailer> mailer = nullptr);
  ~Service();
  Service(const Service&) = delete;
  Service& operator=(const Service&) = delete;

  /// Binds to config().host and config().port (0 picks a free port); returns the bound port.
  int bind();
  /// Serves until stop(). Call bind() first.
  void run();
  void stop();

  /// Removes expired sessions now; returns how many were removed.
  std::size_t sweep_sessions();
  /// Blocks until every queued report has been handed to the mailer.
  void flush_reports();

  const ServiceConfig& config() const;
  httplib::Server& http();

 private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace gaitworks
