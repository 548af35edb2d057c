#include "gaitworks/service.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <deque>
#include <fstream>
#include <iostream>
#include <mutex>
#include <random>
#include <regex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "gaitworks/explain.hpp"
#include "gaitworks/pipeline.hpp"
#include "gaitworks/png_io.hpp"
#include "gaitworks/zip.hpp"

namespace gaitworks {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

/// Error with an HTTP status and a machine-readable code.
struct HttpError : std::runtime_error {
  int status;
  std::string code;
  HttpError(int s, std::string c, const std::string& message)
      : std::runtime_error(message), status(s), code(std::move(c)) {}
};

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& code, const std::string& message) {
  send_json(res, status, {{"error", message}, {"code", code}});
}

std::string env_or(const char* name, const std::string& fallback) {
  const char* v = std::getenv(name);
  return v && *v ? std::string(v) : fallback;
}

long long env_int(const char* name, long long fallback, long long lo, long long hi) {
  const std::string v = env_or(name, "");
  if (v.empty()) return fallback;
  std::size_t used = 0;
  long long n = 0;
  try {
    n = std::stoll(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used != v.size() || n < lo || n > hi)
    throw ServiceError(std::string(name) + " must be an integer in [" + std::to_string(lo) + ", " +
                       std::to_string(hi) + "], got '" + v + "'");
  return n;
}

std::string new_session_id() {
  static std::mutex mu;
  static std::random_device device;
  std::lock_guard lock(mu);
  std::uniform_int_distribution<std::uint64_t> dist;
  char buf[33];
  std::snprintf(buf, sizeof buf, "%016llx%016llx", static_cast<unsigned long long>(dist(device)),
                static_cast<unsigned long long>(dist(device)));
  return buf;
}

bool valid_session_id(const std::string& id) {
  return id.size() == 32 && std::all_of(id.begin(), id.end(), [](char c) {
           return (c >= '0' && c <= '9') || (c >= 'a' && c <= 'f');
         });
}

std::int64_t unix_now() {
  return std::chrono::duration_cast<std::chrono::seconds>(std::chrono::system_clock::now().time_since_epoch())
      .count();
}

std::string base64_lines(const std::vector<std::uint8_t>& data) {
  const std::string flat = httplib::detail::base64_encode(std::string(data.begin(), data.end()));
  std::string out;
  for (std::size_t i = 0; i < flat.size(); i += 76) out += flat.substr(i, 76) + "\r\n";
  return out;
}

std::string base64(const std::vector<std::uint8_t>& data) {
  return httplib::detail::base64_encode(std::string(data.begin(), data.end()));
}

json prediction_json(const Prediction& p) {
  return {{"label", std::string(class_name(p.gait_class()))},
          {"label_index", p.label},
          {"probabilities", std::vector<float>(p.probabilities.begin(), p.probabilities.end())}};
}

std::string basename_of(const std::string& name) {
  const auto slash = name.find_last_of('/');
  return slash == std::string::npos ? name : name.substr(slash + 1);
}

bool has_extension(const std::string& name, const std::string& ext) {
  if (name.size() < ext.size()) return false;
  std::string tail = name.substr(name.size() - ext.size());
  std::transform(tail.begin(), tail.end(), tail.begin(), [](unsigned char c) { return std::tolower(c); });
  return tail == ext;
}

bool is_png(const std::string& bytes) { return bytes.size() >= 8 && bytes.compare(0, 8, "\x89PNG\r\n\x1a\n") == 0; }

GrayImage gray_energy_image(const RawImage& raw) {
  if (raw.width != kEnergySize || raw.height != kEnergySize)
    throw HttpError(400, "bad_image_size",
                    "energy images must be " + std::to_string(kEnergySize) + "x" + std::to_string(kEnergySize) +
                        ", got " + std::to_string(raw.width) + "x" + std::to_string(raw.height));
  if (raw.channels == 3) {
    for (std::size_t i = 0; i < raw.pixels.size(); i += 3)
      if (raw.pixels[i] != raw.pixels[i + 1] || raw.pixels[i] != raw.pixels[i + 2])
        throw HttpError(400, "not_grayscale", "energy images must be grayscale");
  }
  return gray_from_raw(raw);
}

struct Session {
  std::string id;
  std::int64_t created_at = 0;
  std::int64_t expires_at = 0;
  EnergyImage image;
  Prediction prediction;
  json summary;  // classification response
};

class SessionStore {
 public:
  SessionStore(fs::path dir, std::chrono::seconds ttl) : dir_(std::move(dir)), ttl_(ttl) {
    fs::create_directories(dir_);
  }

  const fs::path& dir() const { return dir_; }

  std::string create(const EnergyImage& image, const Prediction& prediction, json summary) {
    const std::string id = new_session_id();
    const auto now = unix_now();
    const fs::path staging = dir_ / (".staging-" + id);
    fs::create_directories(staging);
    summary["session_id"] = id;
    const json meta{{"id", id},
                    {"created_at", now},
                    {"expires_at", now + ttl_.count()},
                    {"kind", std::string(kind_name(image.kind))},
                    {"prediction", prediction_json(prediction)},
                    {"summary", summary}};
    std::ofstream(staging / "session.json") << meta.dump();
    std::ofstream raw(staging / "image.f32", std::ios::binary);
    raw.write(reinterpret_cast<const char*>(image.pixels.pixels.data()),
              static_cast<std::streamsize>(image.pixels.pixels.size() * sizeof(float)));
    raw.close();
    write_file(staging / "image.png", encode_gray_png(image.pixels));
    fs::rename(staging, dir_ / id);  // atomic publish
    return id;
  }

  /// Live session or 404. Expiry at access time is authoritative.
  Session load(const std::string& id) const {
    if (!valid_session_id(id)) throw HttpError(404, "session_not_found", "unknown session");
    const fs::path d = dir_ / id;
    std::ifstream in(d / "session.json");
    if (!in) throw HttpError(404, "session_not_found", "unknown session");
    const json meta = json::parse(in, nullptr, false);
    if (meta.is_discarded()) throw HttpError(404, "session_not_found", "unknown session");
    Session s;
    s.id = id;
    s.created_at = meta.at("created_at").get<std::int64_t>();
    s.expires_at = meta.at("expires_at").get<std::int64_t>();
    if (unix_now() >= s.expires_at) throw HttpError(404, "session_expired", "session expired");
    s.image.kind = parse_kind(meta.at("kind").get<std::string>()).value_or(EnergyKind::gei);
    s.image.pixels = GrayImage(kEnergySize, kEnergySize);
    std::ifstream raw(d / "image.f32", std::ios::binary);
    raw.read(reinterpret_cast<char*>(s.image.pixels.pixels.data()),
             static_cast<std::streamsize>(s.image.pixels.pixels.size() * sizeof(float)));
    if (!raw) throw HttpError(404, "session_not_found", "session data missing");
    const auto& p = meta.at("prediction");
    s.prediction.label = p.at("label_index").get<int>();
    const auto probs = p.at("probabilities").get<std::vector<float>>();
    std::copy_n(probs.begin(), std::min(probs.size(), s.prediction.probabilities.size()),
                s.prediction.probabilities.begin());
    s.summary = meta.at("summary");
    return s;
  }

  std::size_t sweep() {
    std::size_t removed = 0;
    const auto now = unix_now();
    std::error_code ec;
    for (const auto& e : fs::directory_iterator(dir_, ec)) {
      const std::string name = e.path().filename().string();
      if (!valid_session_id(name)) continue;
      std::ifstream in(e.path() / "session.json");
      const json meta = json::parse(in, nullptr, false);
      const bool expired = meta.is_discarded() || !meta.contains("expires_at") ||
                           now >= meta["expires_at"].get<std::int64_t>();
      if (expired) {
        fs::remove_all(e.path(), ec);
        ++removed;
      }
    }
    return removed;
  }

 private:
  fs::path dir_;
  std::chrono::seconds ttl_;
};

std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size())
    s.replace(pos, from.size(), to);
  return s;
}

std::string shell_quote(const std::string& s) { return "'" + replace_all(s, "'", "'\\''") + "'"; }

}  // namespace

// --- configuration and mail

ServiceConfig ServiceConfig::from_env() {
  ServiceConfig c;
  c.port = static_cast<int>(env_int("GAITWORKS_PORT", c.port, 0, 65535));
  c.model_gei = env_or("GAITWORKS_MODEL_GEI", "");
  c.model_sei = env_or("GAITWORKS_MODEL_SEI", "");
  c.session_ttl = std::chrono::seconds(env_int("GAITWORKS_SESSION_TTL_SECS", c.session_ttl.count(), 1, 1LL << 31));
  c.max_upload_bytes =
      static_cast<std::size_t>(env_int("GAITWORKS_MAX_UPLOAD_MB", static_cast<long long>(c.max_upload_bytes >> 20), 1,
                                       1 << 16))
      << 20;
  c.smtp_url = env_or("GAITWORKS_SMTP_URL", "");
  c.decoder_cmd = env_or("GAITWORKS_DECODER_CMD", "");
  return c;
}

bool valid_email(const std::string& address) {
  static const std::regex pattern(R"(^[A-Za-z0-9!#$%&'*+/=?^_`{|}~.-]+@[A-Za-z0-9-]+(\.[A-Za-z0-9-]+)+$)");
  if (address.size() > 254 || !std::regex_match(address, pattern)) return false;
  const auto at = address.find('@');
  const std::string local = address.substr(0, at);
  return local.front() != '.' && local.back() != '.' && local.find("..") == std::string::npos;
}

std::string MailMessage::to_mime(const std::string& boundary) const {
  std::ostringstream m;
  m << "From: " << from << "\r\n";
  m << "To: ";
  for (std::size_t i = 0; i < to.size(); ++i) m << (i ? ", " : "") << to[i];
  m << "\r\nSubject: " << subject << "\r\n";
  m << "MIME-Version: 1.0\r\n";
  m << "Content-Type: multipart/mixed; boundary=\"" << boundary << "\"\r\n\r\n";
  m << "--" << boundary << "\r\nContent-Type: text/plain; charset=utf-8\r\n\r\n" << text << "\r\n";
  for (const auto& a : attachments) {
    m << "--" << boundary << "\r\nContent-Type: " << a.content_type << "\r\n";
    m << "Content-Transfer-Encoding: base64\r\n";
    m << "Content-Disposition: attachment; filename=\"" << a.filename << "\"\r\n\r\n";
    m << base64_lines(a.data);
  }
  m << "--" << boundary << "--\r\n";
  return m.str();
}

// --- service

struct Service::Impl {
  ServiceConfig config;
  std::optional<Model> gei_model;
  std::optional<Model> sei_model;
  std::unique_ptr<Mailer> mailer;
  std::unique_ptr<SessionStore> sessions;
  httplib::Server server;
  int bound_port = -1;

  std::mutex mail_mu;
  std::condition_variable mail_cv;
  std::deque<MailMessage> outbox;
  bool mail_busy = false;
  bool stopping = false;
  std::thread mail_worker;
  std::thread sweeper;

  const Model& model_for(EnergyKind kind) const {
    const auto& m = kind == EnergyKind::gei ? gei_model : sei_model;
    if (!m)
      throw HttpError(400, "representation_unavailable",
                      "no " + std::string(kind_name(kind)) + " model is loaded on this server");
    return *m;
  }

  void start_threads() {
    sessions = std::make_unique<SessionStore>(
        config.session_dir.empty() ? fs::temp_directory_path() / "gaitworks-sessions" : config.session_dir,
        config.session_ttl);
    mail_worker = std::thread([this] { mail_loop(); });
    sweeper = std::thread([this] { sweep_loop(); });
    routes();
  }

  void shutdown() {
    {
      std::lock_guard lock(mail_mu);
      stopping = true;
    }
    mail_cv.notify_all();
    server.stop();
    if (mail_worker.joinable()) mail_worker.join();
    if (sweeper.joinable()) sweeper.join();
  }

  void mail_loop() {
    std::unique_lock lock(mail_mu);
    while (true) {
      mail_cv.wait(lock, [this] { return stopping || !outbox.empty(); });
      if (outbox.empty()) return;
      MailMessage msg = std::move(outbox.front());
      outbox.pop_front();
      mail_busy = true;
      lock.unlock();
      try {
        mailer->send(msg);
      } catch (const std::exception& e) {
        std::cerr << "gaitworks: report delivery failed: " << e.what() << "\n";
      }
      lock.lock();
      mail_busy = false;
      mail_cv.notify_all();
    }
  }

  void sweep_loop() {
    const auto period = std::min<std::chrono::seconds>(config.session_ttl, std::chrono::seconds(60));
    std::unique_lock lock(mail_mu);
    while (!mail_cv.wait_for(lock, period, [this] { return stopping; })) {
      lock.unlock();
      sessions->sweep();
      lock.lock();
    }
  }

  template <class Fn>
  httplib::Server::Handler guarded(Fn fn) {
    return [fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const HttpError& e) {
        send_error(res, e.status, e.code, e.what());
      } catch (const NoGaitCycleError& e) {
        send_error(res, 400, "no_gait_cycle", e.what());
      } catch (const DataError& e) {
        send_error(res, 400, "bad_input", e.what());
      } catch (const ZipError& e) {
        send_error(res, 400, "malformed_archive", e.what());
      } catch (const ImageIoError& e) {
        send_error(res, 400, "malformed_image", e.what());
      } catch (const std::exception& e) {
        std::cerr << "gaitworks: internal error on " << req.path << ": " << e.what() << "\n";
        send_error(res, 500, "internal", "internal server error");
      }
    };
  }

  void routes() {
    server.set_payload_max_length(config.max_upload_bytes);
    server.set_error_handler([](const httplib::Request&, httplib::Response& res) {
      if (!res.body.empty()) return httplib::Server::HandlerResponse::Unhandled;
      switch (res.status) {
        case 404: send_error(res, 404, "not_found", "no such endpoint"); break;
        case 413: send_error(res, 413, "payload_too_large", "upload exceeds the size limit"); break;
        default: send_error(res, res.status, "http_error", httplib::status_message(res.status)); break;
      }
      return httplib::Server::HandlerResponse::Handled;
    });
    server.set_exception_handler([](const httplib::Request&, httplib::Response& res, std::exception_ptr) {
      send_error(res, 500, "internal", "internal server error");
    });

    server.Get("/api/health", guarded([this](const httplib::Request&, httplib::Response& res) {
      json kinds = json::array();
      if (gei_model) kinds.push_back("gei");
      if (sei_model) kinds.push_back("sei");
      send_json(res, 200, {{"status", "ok"}, {"model_loaded", true}, {"representation_kinds", kinds}});
    }));
    server.Post("/api/classify", guarded([this](const httplib::Request& req, httplib::Response& res) {
      send_json(res, 200, classify(req));
    }));
    server.Get(R"(/api/session/([^/]+)/layers)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      const Session s = sessions->load(req.matches[1]);
      json layers = json::array();
      for (const auto& l : conv_layer_table(model_for(s.image.kind)))
        layers.push_back({{"index", l.index},
                          {"kind", "conv2d"},
                          {"channels", l.channels},
                          {"spatial_dims", {l.height, l.width}}});
      send_json(res, 200, {{"session_id", s.id}, {"layers", layers}});
    }));
    server.Get(R"(/api/session/([^/]+)/feature-map)",
               guarded([this](const httplib::Request& req, httplib::Response& res) {
                 const Session s = sessions->load(req.matches[1]);
                 const Model& model = model_for(s.image.kind);
                 const auto layer = index_param(req, "layer");
                 const auto channel = index_param(req, "channel");
                 const auto table = conv_layer_table(model);
                 if (layer >= table.size())
                   throw HttpError(400, "bad_layer",
                                   "layer must lie in [0, " + std::to_string(table.size()) + ")");
                 if (channel >= table[layer].channels)
                   throw HttpError(400, "bad_channel",
                                   "channel must lie in [0, " + std::to_string(table[layer].channels) + ")");
                 const auto bytes = encode_gray_png(feature_map(model, s.image, layer, channel));
                 res.set_content(std::string(bytes.begin(), bytes.end()), "image/png");
               }));
    server.Post(R"(/api/session/([^/]+)/explain)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      explain(req, res);
    }));
    server.Post(R"(/api/session/([^/]+)/report)", guarded([this](const httplib::Request& req, httplib::Response& res) {
      report(req, res);
    }));
  }

  static std::size_t index_param(const httplib::Request& req, const std::string& name) {
    if (!req.has_param(name)) throw HttpError(400, "missing_parameter", "query parameter '" + name + "' is required");
    const std::string v = req.get_param_value(name);
    if (v.empty() || v.size() > 6 || !std::all_of(v.begin(), v.end(), [](char c) { return c >= '0' && c <= '9'; }))
      throw HttpError(400, "bad_parameter", "'" + name + "' must be a non-negative integer");
    return static_cast<std::size_t>(std::stoul(v));
  }

  static json body_json(const httplib::Request& req) {
    if (req.body.empty()) return json::object();
    json j = json::parse(req.body, nullptr, false);
    if (j.is_discarded() || !j.is_object()) throw HttpError(400, "malformed_json", "request body must be a JSON object");
    return j;
  }

  static std::string form_field(const httplib::Request& req, const std::string& name, const std::string& fallback) {
    if (req.has_file(name)) return req.get_file_value(name).content;
    if (req.has_param(name)) return req.get_param_value(name);
    return fallback;
  }

  std::vector<ColorFrame> decode_external(const std::string& upload) const {
    const fs::path work = sessions->dir() / (".decode-" + new_session_id());
    fs::create_directories(work / "frames");
    struct Cleanup {
      fs::path p;
      ~Cleanup() {
        std::error_code ec;
        fs::remove_all(p, ec);
      }
    } cleanup{work};
    write_file(work / "upload.bin",
               std::span(reinterpret_cast<const std::uint8_t*>(upload.data()), upload.size()));
    std::string cmd = replace_all(config.decoder_cmd, "{input}", shell_quote((work / "upload.bin").string()));
    cmd = replace_all(cmd, "{output}", shell_quote((work / "frames").string()));
    if (std::system(cmd.c_str()) != 0) throw HttpError(400, "decode_failed", "the video decoder rejected the upload");
    return load_color_frames(work / "frames");
  }

  json classify(const httplib::Request& req) {
    if (!req.is_multipart_form_data())
      throw HttpError(415, "unsupported_media_type", "upload must be multipart/form-data with a 'file' part");
    if (!req.has_file("file")) throw HttpError(400, "missing_file", "multipart field 'file' is required");
    const auto& file = req.get_file_value("file");
    const auto kind = parse_kind(form_field(req, "representation", "gei"));
    if (!kind) throw HttpError(400, "bad_representation", "representation must be gei or sei");
    double fps = kTargetFps;
    const std::string fps_text = form_field(req, "fps", "");
    if (!fps_text.empty()) {
      char* end = nullptr;
      fps = std::strtod(fps_text.c_str(), &end);
      if (end != fps_text.c_str() + fps_text.size() || !(fps > 0.0) || fps > 1000.0)
        throw HttpError(400, "bad_fps", "fps must be a positive number");
    }
    const Model& model = model_for(*kind);

    const std::string& bytes = file.content;
    const std::span<const std::uint8_t> span(reinterpret_cast<const std::uint8_t*>(bytes.data()), bytes.size());
    std::vector<EnergyImage> images;
    std::vector<GaitCycle> cycles;
    std::string source;
    if (is_png(bytes)) {
      source = "image";
      EnergyImage e;
      e.pixels = gray_energy_image(decode_png(span));
      e.kind = *kind;
      e.provenance = "upload";
      images.push_back(std::move(e));
    } else {
      std::vector<ColorFrame> frames;
      std::optional<ColorFrame> plate;
      std::vector<PoseFrame> poses;
      if (looks_like_zip(span)) {
        source = "archive";
        auto entries = read_zip(span, 8 * config.max_upload_bytes);
        std::sort(entries.begin(), entries.end(), [](const ZipEntry& a, const ZipEntry& b) { return a.name < b.name; });
        for (const auto& e : entries) {
          const std::string base = basename_of(e.name);
          if (base.empty() || base[0] == '.' || e.name.rfind("__MACOSX/", 0) == 0) continue;
          if (*kind == EnergyKind::gei && has_extension(base, ".png")) {
            ColorFrame f = frame_from_raw(decode_png(e.data));
            if (base == "background.png") plate = std::move(f);
            else frames.push_back(std::move(f));
          } else if (*kind == EnergyKind::sei && has_extension(base, ".json")) {
            try {
              poses.push_back(parse_pose(std::string(e.data.begin(), e.data.end())));
            } catch (const DataError& err) {
              throw DataError(e.name + ": " + err.what());
            }
          }
        }
      } else if (!config.decoder_cmd.empty() && *kind == EnergyKind::gei) {
        source = "video";
        frames = decode_external(bytes);
      } else {
        throw HttpError(415, "unsupported_media_type", "upload must be a PNG energy image or a ZIP of frames");
      }

      if (*kind == EnergyKind::gei) {
        if (frames.empty()) throw HttpError(400, "no_frames", "the archive holds no PNG frames");
        for (const auto& f : frames)
          if (f.width != frames[0].width || f.height != frames[0].height)
            throw HttpError(400, "frame_size_mismatch", "frames differ in size");
        const auto prepared = prepare_silhouettes(segment_video(frames, fps, plate ? &*plate : nullptr));
        images = cycle_geis(prepared);
        cycles = prepared.cycles;
      } else {
        if (poses.empty()) throw HttpError(400, "no_frames", "the archive holds no pose JSON files");
        const auto prepared = prepare_poses(poses, fps);
        images = cycle_seis(prepared);
        cycles = prepared.cycles;
      }
      for (auto& e : images) e.kind = *kind;
    }

    json per_cycle = json::array();
    std::vector<Prediction> predictions;
    for (std::size_t i = 0; i < images.size(); ++i) {
      predictions.push_back(predict(model, images[i]));
      json c = prediction_json(predictions.back());
      c["index"] = i;
      if (i < cycles.size()) {
        c["start_frame"] = cycles[i].start_frame;
        c["end_frame"] = cycles[i].end_frame;
      }
      per_cycle.push_back(std::move(c));
    }
    const Prediction& first = predictions.front();
    json out = prediction_json(first);
    out["class_names"] = std::vector<std::string>(kClassNames.begin(), kClassNames.end());
    out["representation"] = std::string(kind_name(*kind));
    out["source"] = source;
    out["cycles"] = per_cycle;
    out["session_id"] = sessions->create(images.front(), first, out);
    return out;
  }

  void explain(const httplib::Request& req, httplib::Response& res) {
    const Session s = sessions->load(req.matches[1]);
    const Model& model = model_for(s.image.kind);
    const json body = body_json(req);
    const auto method = parse_method(body.value("method", std::string("gradcam")));
    if (!method) throw HttpError(400, "bad_method", "method must be saliency or gradcam");
    std::optional<int> target;
    if (body.contains("target_class") && !body["target_class"].is_null()) {
      if (!body["target_class"].is_number_integer()) throw HttpError(400, "bad_target", "target_class must be an integer");
      const int t = body["target_class"].get<int>();
      if (t < 0 || t >= kNumClasses)
        throw HttpError(400, "bad_target", "target_class must lie in [0, " + std::to_string(kNumClasses) + ")");
      target = t;
    }
    const std::size_t n_conv = model.conv_layers().size();
    std::size_t layer = n_conv - 1;
    if (body.contains("layer") && !body["layer"].is_null()) {
      if (!body["layer"].is_number_integer() || body["layer"].get<long long>() < 0 ||
          body["layer"].get<long long>() >= static_cast<long long>(n_conv))
        throw HttpError(400, "bad_layer", "layer must lie in [0, " + std::to_string(n_conv) + ")");
      layer = body["layer"].get<std::size_t>();
    }
    const HeatMap map = *method == HeatMethod::saliency ? saliency(model, s.image, target)
                                                        : grad_cam(model, s.image, layer, target);
    const auto overlay = encode_png(render_overlay(s.image.pixels, map.values));
    json meta{{"session_id", s.id},
              {"method", method_name(map.method)},
              {"target_class", map.target_class},
              {"target_label", std::string(class_name(static_cast<GaitClass>(map.target_class)))},
              {"layer", map.source_layer ? json(*map.source_layer) : json(nullptr)},
              {"lower_half_mass", lower_half_mass(map.values)},
              {"width", map.values.width},
              {"height", map.values.height}};
    const bool want_png = req.get_param_value("format") == "png" ||
                          req.get_header_value("Accept").find("image/png") != std::string::npos;
    if (want_png) {
      res.set_header("X-Gaitworks-Explain", meta.dump());
      res.set_content(std::string(overlay.begin(), overlay.end()), "image/png");
      return;
    }
    meta["overlay_png"] = base64(overlay);
    meta["heatmap_png"] = base64(encode_gray_png(map.values));
    send_json(res, 200, meta);
  }

  void report(const httplib::Request& req, httplib::Response& res) {
    const Session s = sessions->load(req.matches[1]);
    if (!mailer) throw HttpError(501, "reports_disabled", "no mail gateway is configured");
    const json body = body_json(req);
    const std::string email = body.value("email", std::string());
    if (!valid_email(email)) throw HttpError(400, "invalid_email", "'" + email + "' is not a valid e-mail address");

    const Model& model = model_for(s.image.kind);
    const std::string label(class_name(s.prediction.gait_class()));
    MailMessage msg;
    msg.from = config.mail_from;
    msg.to = {email};
    msg.subject = "Gait analysis report: " + label;
    std::ostringstream text;
    text << "Predicted gait: " << label << "\r\n\r\nClass probabilities:\r\n";
    for (int c = 0; c < kNumClasses; ++c)
      text << "  " << class_name(static_cast<GaitClass>(c)) << ": " << s.prediction.probabilities[c] << "\r\n";
    text << "\r\nSession " << s.id << ", " << kind_name(s.image.kind) << " representation.\r\n";
    msg.text = text.str();
    msg.attachments.push_back({"energy_image.png", "image/png", encode_gray_png(s.image.pixels)});
    const auto cam = grad_cam(model, s.image, model.conv_layers().size() - 1, s.prediction.label);
    msg.attachments.push_back({"gradcam.png", "image/png", encode_png(render_overlay(s.image.pixels, cam.values))});
    const auto sal = saliency(model, s.image, s.prediction.label);
    msg.attachments.push_back({"saliency.png", "image/png", encode_png(render_overlay(s.image.pixels, sal.values))});
    {
      std::lock_guard lock(mail_mu);
      outbox.push_back(std::move(msg));
    }
    mail_cv.notify_all();
    send_json(res, 202, {{"status", "queued"}, {"to", email}, {"session_id", s.id}});
  }
};

Service::Service(ServiceConfig config, std::unique_ptr<Mailer> mailer) : impl_(std::make_unique<Impl>()) {
  impl_->config = std::move(config);
  auto& c = impl_->config;
  if (c.model_gei.empty() && c.model_sei.empty())
    throw ServiceError("no model configured: set GAITWORKS_MODEL_GEI and/or GAITWORKS_MODEL_SEI");
  auto load = [](const fs::path& p, EnergyKind kind) -> std::optional<Model> {
    if (p.empty()) return std::nullopt;
    if (!fs::exists(p)) throw ServiceError("model file not found: " + p.string());
    try {
      Model m = load_model(p);
      m.set_kind(kind);
      return m;
    } catch (const std::exception& e) {
      throw ServiceError("cannot load model " + p.string() + ": " + e.what());
    }
  };
  impl_->gei_model = load(c.model_gei, EnergyKind::gei);
  impl_->sei_model = load(c.model_sei, EnergyKind::sei);
  impl_->mailer = mailer ? std::move(mailer) : (c.smtp_url.empty() ? nullptr : make_smtp_mailer(c.smtp_url));
  impl_->start_threads();
}

Service::Service(ServiceConfig config, std::optional<Model> gei_model, std::optional<Model> sei_model,
                 std::unique_ptr<Mailer> mailer)
    : impl_(std::make_unique<Impl>()) {
  if (!gei_model && !sei_model) throw ServiceError("no model given");
  impl_->config = std::move(config);
  impl_->gei_model = std::move(gei_model);
  impl_->sei_model = std::move(sei_model);
  if (impl_->gei_model) impl_->gei_model->set_kind(EnergyKind::gei);
  if (impl_->sei_model) impl_->sei_model->set_kind(EnergyKind::sei);
  const auto& url = impl_->config.smtp_url;
  impl_->mailer = mailer ? std::move(mailer) : (url.empty() ? nullptr : make_smtp_mailer(url));
  impl_->start_threads();
}

Service::~Service() { impl_->shutdown(); }

int Service::bind() {
  auto& s = impl_->server;
  s.new_task_queue = [n = impl_->config.threads] { return new httplib::ThreadPool(n); };
  const int port = impl_->config.port == 0 ? s.bind_to_any_port(impl_->config.host)
                                           : (s.bind_to_port(impl_->config.host, impl_->config.port)
                                                  ? impl_->config.port
                                                  : -1);
  if (port < 0)
    throw ServiceError("cannot bind " + impl_->config.host + ":" + std::to_string(impl_->config.port));
  impl_->bound_port = port;
  return port;
}

void Service::run() {
  if (impl_->bound_port < 0) throw ServiceError("run() before bind()");
  impl_->server.listen_after_bind();
}

void Service::stop() { impl_->server.stop(); }

std::size_t Service::sweep_sessions() { return impl_->sessions->sweep(); }

void Service::flush_reports() {
  std::unique_lock lock(impl_->mail_mu);
  impl_->mail_cv.wait(lock, [this] { return impl_->outbox.empty() && !impl_->mail_busy; });
}

const ServiceConfig& Service::config() const { return impl_->config; }

httplib::Server& Service::http() { return impl_->server; }

}  // namespace gaitworks
