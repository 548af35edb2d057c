#include <cstring>
#include <mutex>

#include <curl/curl.h>

#include "gaitworks/service.hpp"

namespace gaitworks {
namespace {

struct Upload {
  const std::string* data;
  std::size_t offset = 0;
};

std::size_t read_chunk(char* buffer, std::size_t size, std::size_t count, void* user) {
  auto* up = static_cast<Upload*>(user);
  const std::size_t n = std::min(size * count, up->data->size() - up->offset);
  std::memcpy(buffer, up->data->data() + up->offset, n);
  up->offset += n;
  return n;
}

std::string angle_addr(const std::string& a) { return a.front() == '<' ? a : "<" + a + ">"; }

class SmtpMailer final : public Mailer {
 public:
  explicit SmtpMailer(std::string url) : url_(std::move(url)) {
    static std::once_flag once;
    std::call_once(once, [] { curl_global_init(CURL_GLOBAL_DEFAULT); });
  }

  void send(const MailMessage& message) override {
    CURL* curl = curl_easy_init();
    if (!curl) throw ServiceError("smtp: curl_easy_init failed");
    const std::string payload = message.to_mime();
    Upload up{&payload};
    curl_slist* rcpt = nullptr;
    for (const auto& to : message.to) rcpt = curl_slist_append(rcpt, angle_addr(to).c_str());
    const std::string from = angle_addr(message.from);
    curl_easy_setopt(curl, CURLOPT_URL, url_.c_str());
    curl_easy_setopt(curl, CURLOPT_MAIL_FROM, from.c_str());
    curl_easy_setopt(curl, CURLOPT_MAIL_RCPT, rcpt);
    curl_easy_setopt(curl, CURLOPT_READFUNCTION, read_chunk);
    curl_easy_setopt(curl, CURLOPT_READDATA, &up);
    curl_easy_setopt(curl, CURLOPT_UPLOAD, 1L);
    curl_easy_setopt(curl, CURLOPT_CONNECTTIMEOUT, 10L);
    curl_easy_setopt(curl, CURLOPT_TIMEOUT, 60L);
    curl_easy_setopt(curl, CURLOPT_NOSIGNAL, 1L);
    const CURLcode rc = curl_easy_perform(curl);
    curl_slist_free_all(rcpt);
    curl_easy_cleanup(curl);
    if (rc != CURLE_OK) throw ServiceError(std::string("smtp: ") + curl_easy_strerror(rc));
  }

 private:
  std::string url_;
};

}  // namespace

std::unique_ptr<Mailer> make_smtp_mailer(const std::string& url) {
  if (url.rfind("smtp://", 0) != 0 && url.rfind("smtps://", 0) != 0)
    throw ServiceError("GAITWORKS_SMTP_URL must start with smtp:// or smtps://");
  return std::make_unique<SmtpMailer>(url);
}

}  // namespace gaitworks
