#include <doctest.h>

#include <arpa/inet.h>
#include <netinet/in.h>
#include <sys/socket.h>
#include <unistd.h>

#include <atomic>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <future>
#include <regex>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "fixtures.hpp"
#include "gaitworks/explain.hpp"
#include "gaitworks/pipeline.hpp"
#include "gaitworks/png_io.hpp"
#include "gaitworks/service.hpp"
#include "gaitworks/zip.hpp"

using namespace gaitworks;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

ServiceConfig test_config(const std::string& name) {
  ServiceConfig c;
  c.host = "127.0.0.1";
  c.port = 0;
  c.session_dir = fs::temp_directory_path() / ("gaitworks_service_" + name);
  fs::remove_all(c.session_dir);
  c.threads = 4;
  return c;
}

struct Running {
  Service service;
  int port;
  std::thread thread;

  explicit Running(ServiceConfig config, std::unique_ptr<Mailer> mailer = nullptr)
      : service(std::move(config), fixtures::gei_model(), std::nullopt, std::move(mailer)),
        port(service.bind()),
        thread([this] { service.run(); }) {
    service.http().wait_until_ready();
  }
  ~Running() {
    service.stop();
    thread.join();
  }
  httplib::Client client() const {
    httplib::Client c("127.0.0.1", port);
    c.set_read_timeout(120, 0);
    return c;
  }
};

/// A hemiplegic walker on a green screen: frames, plate and ground truth.
const synth::GeneratedSequence& hemiplegic_walk() {
  static const auto g = [] {
    synth::SequenceOptions o;
    o.render_color = true;
    o.body = synth::Anthropometrics::vary(77);
    return synth::generate_sequence(synth::preset(GaitClass::hemiplegic, 1), 36, 1234, o);
  }();
  return g;
}

std::string frames_zip(const std::vector<ColorFrame>& frames, const ColorFrame* plate) {
  std::vector<ZipEntry> entries;
  char name[64];
  for (std::size_t i = 0; i < frames.size(); ++i) {
    std::snprintf(name, sizeof name, "walk/frame_%04zu.png", i);
    entries.push_back({name, encode_png(raw_from_frame(frames[i]))});
  }
  if (plate) entries.push_back({"walk/background.png", encode_png(raw_from_frame(*plate))});
  const auto bytes = write_zip(entries);
  return {bytes.begin(), bytes.end()};
}

const std::string& hemiplegic_zip() {
  static const std::string z = frames_zip(hemiplegic_walk().color_frames, &hemiplegic_walk().background);
  return z;
}

EnergyImage reference_gei() {
  const auto& g = hemiplegic_walk();
  return cycle_geis(prepare_silhouettes(segment_video(g.color_frames, 10.0, &g.background))).front();
}

std::string base64_decode(const std::string& in) {
  static const std::string alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  unsigned bits = 0;
  int count = 0;
  for (char ch : in) {
    const auto v = alphabet.find(ch);
    if (v == std::string::npos) continue;  // padding
    bits = (bits << 6) | static_cast<unsigned>(v);
    if ((count += 6) >= 8) {
      count -= 8;
      out.push_back(static_cast<char>((bits >> count) & 0xFF));
    }
  }
  return out;
}

std::string png_of(const GrayImage& image) {
  const auto b = encode_gray_png(image);
  return {b.begin(), b.end()};
}

httplib::Result upload(httplib::Client& c, const std::string& content, const std::string& filename,
                       const std::string& representation = "gei", const std::string& fps = "") {
  httplib::MultipartFormDataItems items{{"file", content, filename, "application/octet-stream"},
                                        {"representation", representation, "", ""}};
  if (!fps.empty()) items.push_back({"fps", fps, "", ""});
  return c.Post("/api/classify", items);
}

json body_of(const httplib::Result& r) {
  REQUIRE(r);
  CAPTURE(r->body.substr(0, 300));
  const json j = json::parse(r->body, nullptr, false);
  REQUIRE_FALSE(j.is_discarded());
  return j;
}

std::string classify_png(const Running& svc, const GrayImage& image) {
  auto c = svc.client();
  const auto r = upload(c, png_of(image), "gei.png");
  REQUIRE(r);
  REQUIRE(r->status == 200);
  return body_of(r).at("session_id");
}

/// Single-connection SMTP sink that records the DATA section.
class SmtpStub {
 public:
  SmtpStub() {
    fd_ = ::socket(AF_INET, SOCK_STREAM, 0);
    sockaddr_in addr{};
    addr.sin_family = AF_INET;
    addr.sin_addr.s_addr = htonl(INADDR_LOOPBACK);
    addr.sin_port = 0;
    REQUIRE(::bind(fd_, reinterpret_cast<sockaddr*>(&addr), sizeof addr) == 0);
    socklen_t len = sizeof addr;
    ::getsockname(fd_, reinterpret_cast<sockaddr*>(&addr), &len);
    port_ = ntohs(addr.sin_port);
    REQUIRE(::listen(fd_, 4) == 0);
    thread_ = std::thread([this] { serve(); });
  }
  ~SmtpStub() {
    ::shutdown(fd_, SHUT_RDWR);
    ::close(fd_);
    thread_.join();
  }
  std::string url() const { return "smtp://127.0.0.1:" + std::to_string(port_); }
  std::vector<std::string> messages() {
    std::lock_guard lock(mu_);
    return messages_;
  }
  std::vector<std::string> recipients() {
    std::lock_guard lock(mu_);
    return rcpt_;
  }

 private:
  void serve() {
    while (true) {
      const int c = ::accept(fd_, nullptr, nullptr);
      if (c < 0) return;
      session(c);
      ::close(c);
    }
  }
  static void say(int c, const std::string& line) { ::send(c, line.data(), line.size(), MSG_NOSIGNAL); }
  void session(int c) {
    say(c, "220 stub ESMTP\r\n");
    std::string buf, data;
    bool in_data = false;
    char chunk[4096];
    while (true) {
      const auto n = ::recv(c, chunk, sizeof chunk, 0);
      if (n <= 0) return;
      buf.append(chunk, static_cast<std::size_t>(n));
      while (true) {
        if (in_data) {
          const auto end = buf.find("\r\n.\r\n");
          if (end == std::string::npos) break;
          data += buf.substr(0, end + 2);
          buf.erase(0, end + 5);
          in_data = false;
          {
            std::lock_guard lock(mu_);
            messages_.push_back(data);
          }
          data.clear();
          say(c, "250 queued\r\n");
          continue;
        }
        const auto eol = buf.find("\r\n");
        if (eol == std::string::npos) break;
        const std::string line = buf.substr(0, eol);
        buf.erase(0, eol + 2);
        const std::string verb = line.substr(0, 4);
        if (verb == "EHLO" || verb == "HELO") say(c, "250 stub\r\n");
        else if (verb == "MAIL") say(c, "250 ok\r\n");
        else if (verb == "RCPT") {
          std::lock_guard lock(mu_);
          rcpt_.push_back(line);
          say(c, "250 ok\r\n");
        } else if (verb == "DATA") {
          in_data = true;
          say(c, "354 go ahead\r\n");
        } else if (verb == "QUIT") {
          say(c, "221 bye\r\n");
          return;
        } else say(c, "250 ok\r\n");
      }
    }
  }

  int fd_ = -1;
  int port_ = 0;
  std::thread thread_;
  std::mutex mu_;
  std::vector<std::string> messages_;
  std::vector<std::string> rcpt_;
};

Running& shared_service() {
  static Running svc(test_config("shared"));
  return svc;
}

}  // namespace

TEST_CASE("health") {
  auto c = shared_service().client();
  const auto r = c.Get("/api/health");
  REQUIRE(r);
  CHECK(r->status == 200);
  const auto j = body_of(r);
  CHECK(j["status"] == "ok");
  CHECK(j["model_loaded"] == true);
  CHECK(j["representation_kinds"] == json::array({"gei"}));
  const auto missing = c.Get("/api/nothing");
  REQUIRE(missing);
  CHECK(missing->status == 404);
  CHECK(body_of(missing)["code"] == "not_found");
}

TEST_CASE("classify a direct GEI upload") {
  auto c = shared_service().client();
  const auto gei = reference_gei();
  const auto r = upload(c, png_of(gei.pixels), "gei.png");
  REQUIRE(r);
  REQUIRE(r->status == 200);
  CHECK(r->get_header_value("Content-Type") == "application/json");
  const auto j = body_of(r);
  double sum = 0.0;
  for (double p : j["probabilities"]) sum += p;
  CHECK(std::abs(sum - 1.0) <= 1e-6);
  CHECK(j["probabilities"].size() == 5);
  CHECK(j["class_names"] == json::array({"diplegic", "hemiplegic", "neuropathic", "normal", "parkinsonian"}));
  CHECK(j["source"] == "image");
  CHECK(std::regex_match(j["session_id"].get<std::string>(), std::regex("[0-9a-f]{32}")));
  // The service sees the 8-bit PNG, so compare against the quantized image.
  EnergyImage quantized;
  quantized.pixels = gray_from_raw(decode_png(encode_gray_png(gei.pixels)));
  CHECK(j["label_index"] == predict(fixtures::gei_model(), quantized).label);
}

TEST_CASE("classify a green-screen frame archive") {
  auto c = shared_service().client();
  const auto r = upload(c, hemiplegic_zip(), "walk.zip");
  REQUIRE(r);
  REQUIRE(r->status == 200);
  const auto j = body_of(r);
  CHECK(j["label"] == "hemiplegic");
  CHECK(j["source"] == "archive");
  REQUIRE(j["cycles"].size() >= 1);
  CHECK(j["cycles"][0]["probabilities"] == j["probabilities"]);
  // Bit-exact with the library pipeline on the same frames.
  const auto expected = predict(fixtures::gei_model(), reference_gei());
  for (int k = 0; k < kNumClasses; ++k) CHECK(j["probabilities"][k].get<float>() == expected.probabilities[k]);

  // Without a plate the temporal median stands in for the background.
  const auto no_plate = upload(c, frames_zip(hemiplegic_walk().color_frames, nullptr), "walk.zip");
  REQUIRE(no_plate);
  CHECK(no_plate->status == 200);
  CHECK(body_of(no_plate)["label"] == "hemiplegic");
}

TEST_CASE("classify rejects bad uploads with JSON errors") {
  auto c = shared_service().client();
  auto expect = [](const httplib::Result& r, int status, const std::string& code) {
    REQUIRE(r);
    CHECK(r->status == status);
    CHECK(r->get_header_value("Content-Type") == "application/json");
    CHECK(body_of(r)["code"] == code);
  };

  // A figure standing still: no periodic motion.
  const auto& g = hemiplegic_walk();
  std::vector<ColorFrame> still(20, g.color_frames[0]);
  expect(upload(c, frames_zip(still, &g.background), "still.zip"), 400, "no_gait_cycle");

  expect(c.Post("/api/classify", "{}", "application/json"), 415, "unsupported_media_type");
  expect(upload(c, "just some text", "notes.txt"), 415, "unsupported_media_type");
  auto zip = hemiplegic_zip();
  zip[zip.size() / 2] ^= 0x55;
  expect(upload(c, zip, "walk.zip"), 400, "malformed_archive");
  expect(upload(c, png_of(GrayImage(100, 100)), "small.png"), 400, "bad_image_size");
  std::string broken_png = png_of(GrayImage(224, 224)).substr(0, 40);
  expect(upload(c, broken_png, "broken.png"), 400, "malformed_image");
  expect(upload(c, png_of(GrayImage(224, 224)), "g.png", "sei"), 400, "representation_unavailable");
  expect(upload(c, png_of(GrayImage(224, 224)), "g.png", "mei"), 400, "bad_representation");
  expect(upload(c, hemiplegic_zip(), "walk.zip", "gei", "fast"), 400, "bad_fps");
  expect(upload(c, hemiplegic_zip(), "walk.zip", "gei", "5"), 400, "bad_input");
  const auto empty_zip = write_zip({});
  expect(upload(c, std::string(empty_zip.begin(), empty_zip.end()), "empty.zip"), 400, "no_frames");
  httplib::MultipartFormDataItems no_file{{"representation", "gei", "", ""}};
  expect(c.Post("/api/classify", no_file), 400, "missing_file");
}

TEST_CASE("layers and feature maps") {
  const auto id = classify_png(shared_service(), reference_gei().pixels);
  auto c = shared_service().client();
  const auto r = c.Get("/api/session/" + id + "/layers");
  REQUIRE(r);
  REQUIRE(r->status == 200);
  const auto layers = body_of(r)["layers"];
  REQUIRE(layers.size() == 5);
  const int channels[] = {32, 32, 32, 64, 64};
  const int dims[] = {112, 56, 28, 14, 7};
  for (int i = 0; i < 5; ++i) {
    CHECK(layers[i]["index"] == i);
    CHECK(layers[i]["kind"] == "conv2d");
    CHECK(layers[i]["channels"] == channels[i]);
    CHECK(layers[i]["spatial_dims"] == json::array({dims[i], dims[i]}));
  }

  const auto fm = c.Get("/api/session/" + id + "/feature-map?layer=0&channel=12");
  REQUIRE(fm);
  REQUIRE(fm->status == 200);
  CHECK(fm->get_header_value("Content-Type") == "image/png");
  const auto raw = decode_png(std::span(reinterpret_cast<const std::uint8_t*>(fm->body.data()), fm->body.size()));
  CHECK(raw.width == 112);
  CHECK(raw.height == 112);
  CHECK(raw.channels == 1);
  const auto again = c.Get("/api/session/" + id + "/feature-map?layer=0&channel=12");
  REQUIRE(again);
  CHECK(again->body == fm->body);
  const auto deep = c.Get("/api/session/" + id + "/feature-map?layer=4&channel=63");
  REQUIRE(deep);
  CHECK(deep->status == 200);

  for (const std::string q : {"layer=0&channel=32", "layer=5&channel=0", "layer=4&channel=64", "layer=0",
                              "layer=-1&channel=0", "layer=a&channel=0"}) {
    CAPTURE(q);
    const auto bad = c.Get("/api/session/" + id + "/feature-map?" + q);
    REQUIRE(bad);
    CHECK(bad->status == 400);
  }
  for (const std::string sid : {std::string(32, 'a'), std::string("XYZ")}) {
    const auto missing = c.Get("/api/session/" + sid + "/layers");
    REQUIRE(missing);
    CHECK(missing->status == 404);
    CHECK(body_of(missing)["code"] == "session_not_found");
  }
  const auto traversal = c.Get("/api/session/../../etc/layers");
  REQUIRE(traversal);
  CHECK(traversal->status == 404);
}

TEST_CASE("explain") {
  const auto id = classify_png(shared_service(), reference_gei().pixels);
  auto c = shared_service().client();
  const std::string path = "/api/session/" + id + "/explain";

  const auto cam = c.Post(path, R"({"method":"gradcam"})", "application/json");
  REQUIRE(cam);
  REQUIRE(cam->status == 200);
  const auto j = body_of(cam);
  CHECK(j["method"] == "gradcam");
  CHECK(j["layer"] == 4);
  const auto overlay_bytes = base64_decode(j["overlay_png"].get<std::string>());
  const auto overlay = decode_png(std::span(reinterpret_cast<const std::uint8_t*>(overlay_bytes.data()),
                                            overlay_bytes.size()));
  CHECK(overlay.width == 224);
  CHECK(overlay.channels == 3);

  const auto sal = c.Post(path, R"({"method":"saliency","target_class":2})", "application/json");
  REQUIRE(sal);
  REQUIRE(sal->status == 200);
  const auto s = body_of(sal);
  CHECK(s["method"] == "saliency");
  CHECK(s["layer"].is_null());
  CHECK(s["target_class"] == 2);

  const auto layer1 = c.Post(path, R"({"method":"gradcam","layer":1})", "application/json");
  REQUIRE(layer1);
  CHECK(body_of(layer1)["layer"] == 1);

  httplib::Headers accept_png{{"Accept", "image/png"}};
  const auto png = c.Post(path, accept_png, R"({"method":"gradcam"})", "application/json");
  REQUIRE(png);
  CHECK(png->status == 200);
  CHECK(png->get_header_value("Content-Type") == "image/png");
  CHECK(json::parse(png->get_header_value("X-Gaitworks-Explain"))["layer"] == 4);

  for (const std::string bad : {R"({"method":"occlusion"})", R"({"method":"gradcam","layer":5})",
                                R"({"method":"gradcam","target_class":7})", R"([1,2])", "not json"}) {
    CAPTURE(bad);
    const auto r = c.Post(path, bad, "application/json");
    REQUIRE(r);
    CHECK(r->status == 400);
  }
  const auto missing = c.Post("/api/session/" + std::string(32, '0') + "/explain", "{}", "application/json");
  REQUIRE(missing);
  CHECK(missing->status == 404);
}

TEST_CASE("grad-CAM of a hemiplegic upload leans on the lower body") {
  auto c = shared_service().client();
  const auto r = upload(c, hemiplegic_zip(), "walk.zip");
  REQUIRE(r);
  REQUIRE(r->status == 200);
  const std::string id = body_of(r)["session_id"];
  const auto cam = c.Post("/api/session/" + id + "/explain", R"({"method":"gradcam"})", "application/json");
  REQUIRE(cam);
  const double mass = body_of(cam)["lower_half_mass"];
  MESSAGE("lower-half mass " << mass);
  CHECK(mass >= 0.5);
}

TEST_CASE("reports are disabled without a mail gateway") {
  const auto id = classify_png(shared_service(), reference_gei().pixels);
  auto c = shared_service().client();
  const auto r = c.Post("/api/session/" + id + "/report", R"({"email":"doctor@example.org"})", "application/json");
  REQUIRE(r);
  CHECK(r->status == 501);
  CHECK(body_of(r)["code"] == "reports_disabled");
}

TEST_CASE("reports go out over SMTP") {
  SmtpStub smtp;
  auto cfg = test_config("smtp");
  cfg.smtp_url = smtp.url();
  Running svc(cfg);
  const auto gei = reference_gei();
  const auto id = classify_png(svc, gei.pixels);
  auto c = svc.client();
  const std::string path = "/api/session/" + id + "/report";

  const auto bad = c.Post(path, R"({"email":"x@@y"})", "application/json");
  REQUIRE(bad);
  CHECK(bad->status == 400);
  CHECK(body_of(bad)["code"] == "invalid_email");

  const auto ok = c.Post(path, R"({"email":"doctor@example.org"})", "application/json");
  REQUIRE(ok);
  CHECK(ok->status == 202);
  svc.service.flush_reports();
  const auto messages = smtp.messages();
  REQUIRE(messages.size() == 1);
  EnergyImage quantized;
  quantized.pixels = gray_from_raw(decode_png(encode_gray_png(gei.pixels)));
  const std::string label(class_name(predict(fixtures::gei_model(), quantized).gait_class()));
  CHECK(messages[0].find("Predicted gait: " + label) != std::string::npos);
  CHECK(messages[0].find("filename=\"gradcam.png\"") != std::string::npos);
  REQUIRE(smtp.recipients().size() == 1);
  CHECK(smtp.recipients()[0].find("<doctor@example.org>") != std::string::npos);
}

TEST_CASE("e-mail syntax") {
  for (const std::string good : {"a@b.co", "first.last+tag@sub.example.org"}) CHECK(valid_email(good));
  for (const std::string bad : {"x@@y", "", "plain", "@example.org", "a@", "a@b", ".a@b.co", "a..b@c.org", "a b@c.org"})
    CHECK_FALSE(valid_email(bad));
}

TEST_CASE("sessions expire") {
  auto cfg = test_config("ttl");
  cfg.session_ttl = std::chrono::seconds(1);
  Running svc(cfg);
  const auto id = classify_png(svc, reference_gei().pixels);
  auto c = svc.client();
  const auto live = c.Get("/api/session/" + id + "/layers");
  REQUIRE(live);
  CHECK(live->status == 200);
  std::this_thread::sleep_for(std::chrono::milliseconds(2100));
  const auto gone = c.Get("/api/session/" + id + "/layers");
  REQUIRE(gone);
  CHECK(gone->status == 404);
  const auto gone_map = c.Get("/api/session/" + id + "/feature-map?layer=0&channel=0");
  REQUIRE(gone_map);
  CHECK(gone_map->status == 404);
  svc.service.sweep_sessions();
  CHECK_FALSE(fs::exists(cfg.session_dir / id));
}

TEST_CASE("oversized uploads get 413") {
  auto cfg = test_config("limit");
  cfg.max_upload_bytes = 1 << 20;
  Running svc(cfg);
  auto c = svc.client();
  const auto r = upload(c, std::string(2 << 20, 'x'), "big.zip");
  REQUIRE(r);
  CHECK(r->status == 413);
  CHECK(body_of(r)["code"] == "payload_too_large");
}

TEST_CASE("external decoder for video uploads") {
  const fs::path frames = fs::temp_directory_path() / "gaitworks_decoder_frames";
  fs::remove_all(frames);
  fs::create_directories(frames);
  const auto& g = hemiplegic_walk();
  char name[32];
  for (std::size_t i = 0; i < g.color_frames.size(); ++i) {
    std::snprintf(name, sizeof name, "frame_%04zu.png", i);
    write_png(frames / name, raw_from_frame(g.color_frames[i]));
  }
  auto cfg = test_config("decoder");
  // Stand-in decoder: ignores the input and copies pre-rendered frames.
  cfg.decoder_cmd = "test -s {input} && cp " + (frames / "*.png").string() + " {output}/";
  Running svc(cfg);
  auto c = svc.client();
  const auto r = upload(c, "not really a video", "walk.mp4");
  REQUIRE(r);
  REQUIRE(r->status == 200);
  const auto j = body_of(r);
  CHECK(j["source"] == "video");
  CHECK(j["label"] == "hemiplegic");
  fs::remove_all(frames);
}

TEST_CASE("concurrent clients get the serial answers") {
  auto& svc = shared_service();
  synth::DatasetOptions opt;
  opt.keep_frames = false;
  opt.n_frames = 24;
  const auto data = synth::generate_dataset(2, 1, 99, opt);
  std::vector<std::string> uploads;
  for (const auto& s : data.sequences) uploads.push_back(png_of(s.geis.front().pixels));

  auto run = [&](std::size_t i) {
    auto c = svc.client();
    const auto r = upload(c, uploads[i], "gei.png");
    if (!r) return "error " + httplib::to_string(r.error());
    if (r->status != 200) return "status " + std::to_string(r->status) + " " + r->body;
    auto j = json::parse(r->body);
    return j["probabilities"].dump() + j["label"].dump();
  };
  std::vector<std::string> serial;
  for (std::size_t i = 0; i < uploads.size(); ++i) serial.push_back(run(i));

  std::atomic<int> health_failures{0};
  std::atomic<bool> done{false};
  std::thread prober([&] {
    auto c = svc.client();
    while (!done) {
      const auto h = c.Get("/api/health");
      if (!h || h->status != 200) ++health_failures;
    }
  });
  std::vector<std::future<std::string>> futures;
  for (int round = 0; round < 2; ++round)
    for (std::size_t i = 0; i < uploads.size(); ++i) futures.push_back(std::async(std::launch::async, run, i));
  for (std::size_t k = 0; k < futures.size(); ++k) CHECK(futures[k].get() == serial[k % uploads.size()]);
  done = true;
  prober.join();
  CHECK(health_failures == 0);
}

TEST_CASE("startup configuration") {
  CHECK_THROWS_AS(Service(ServiceConfig{}), ServiceError);
  ServiceConfig missing;
  missing.model_gei = "/nonexistent/model.gwm";
  CHECK_THROWS_WITH_AS(Service{missing}, doctest::Contains("model file not found"), ServiceError);

  ::setenv("GAITWORKS_PORT", "9123", 1);
  ::setenv("GAITWORKS_SESSION_TTL_SECS", "60", 1);
  ::setenv("GAITWORKS_MAX_UPLOAD_MB", "5", 1);
  const auto cfg = ServiceConfig::from_env();
  CHECK(cfg.port == 9123);
  CHECK(cfg.session_ttl.count() == 60);
  CHECK(cfg.max_upload_bytes == 5u << 20);
  ::setenv("GAITWORKS_PORT", "eighty", 1);
  CHECK_THROWS_AS(ServiceConfig::from_env(), ServiceError);
  ::unsetenv("GAITWORKS_PORT");
  ::unsetenv("GAITWORKS_SESSION_TTL_SECS");
  ::unsetenv("GAITWORKS_MAX_UPLOAD_MB");
  CHECK_THROWS_AS(make_smtp_mailer("http://example.org"), ServiceError);
}
