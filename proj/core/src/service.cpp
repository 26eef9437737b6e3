#include "changeseg/service.hpp"

#include <atomic>
#include <map>
#include <mutex>
#include <optional>
#include <random>
#include <regex>
#include <shared_mutex>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "changeseg/error.hpp"
#include "changeseg/io_util.hpp"
#include "changeseg/labelex.hpp"
#include "changeseg/mask.hpp"
#include "changeseg/pipeline.hpp"
#include "changeseg/png.hpp"
#include "changeseg/raster.hpp"
#include "changeseg/rle.hpp"

namespace changeseg {

using nlohmann::json;

namespace {

constexpr double kDefaultAlpha = 0.95;
constexpr int kDefaultPc = 2;

// An error that maps straight onto an HTTP status.
struct HttpError {
  int status;
  std::string stage;
  std::string message;
};

struct CachedExpansion {
  LabelMask mask;
  ExpansionStats stats;
};

struct ExportFiles {
  std::string name;
  std::string header;
  std::string payload;
};

struct Session {
  Session(StackedInput s, StackedInput f, PcaModel p)
      : stack(std::move(s)), features(std::move(f)), pca(std::move(p)) {}

  // Guards seeds and export; expansions read under a shared lock.
  std::shared_mutex mu;
  const StackedInput stack;
  const StackedInput features;
  const PcaModel pca;  // full rank; depends only on the stack
  SeedSet seeds;

  std::mutex cache_mu;
  std::map<std::pair<int, double>, std::shared_ptr<const CachedExpansion>> cache;
  std::optional<ExportFiles> last_export;
};

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, const HttpError& e) {
  send_json(res, e.status, {{"error", e.message}, {"stage", e.stage}});
}

std::string new_session_id() {
  static std::mutex mu;
  static std::mt19937_64 gen{std::random_device{}()};
  std::lock_guard lock(mu);
  std::ostringstream os;
  os << std::hex << gen() << gen();
  return os.str();
}

double parse_alpha(const httplib::Request& req, const std::string& stage) {
  if (!req.has_param("alpha")) return kDefaultAlpha;
  const std::string s = req.get_param_value("alpha");
  try {
    std::size_t used = 0;
    const double a = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return a;
  } catch (const std::exception&) {
    throw HttpError{422, stage, "alpha is not a number: '" + s + "'"};
  }
}

int parse_pc(const httplib::Request& req, const std::string& stage) {
  if (!req.has_param("pc")) return kDefaultPc;
  const std::string s = req.get_param_value("pc");
  try {
    std::size_t used = 0;
    const int pc = std::stoi(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return pc;
  } catch (const std::exception&) {
    throw HttpError{422, stage, "pc is not an integer: '" + s + "'"};
  }
}

bool valid_export_name(const std::string& s) {
  static const std::regex kName(R"([A-Za-z0-9_\-]{1,64})");
  return std::regex_match(s, kName);
}

}  // namespace

struct AnnotationService::Impl {
  ServiceOptions options;
  httplib::Server server;
  std::thread thread;
  std::atomic<bool> bound{false};
  int port = 0;

  std::mutex sessions_mu;
  std::map<std::string, std::shared_ptr<Session>> sessions;

  explicit Impl(ServiceOptions o) : options(std::move(o)) { register_routes(); }

  std::shared_ptr<Session> find(const std::string& id) {
    std::lock_guard lock(sessions_mu);
    auto it = sessions.find(id);
    if (it == sessions.end()) throw HttpError{404, "session", "unknown session '" + id + "'"};
    return it->second;
  }

  // Wraps a handler so thrown errors become JSON error responses.
  template <typename Fn>
  httplib::Server::Handler guarded(const std::string& stage, Fn fn) {
    return [this, stage, fn](const httplib::Request& req, httplib::Response& res) {
      try {
        fn(req, res);
      } catch (const HttpError& e) {
        send_error(res, e);
      } catch (const InvalidArgument& e) {
        send_error(res, {422, stage, e.what()});
      } catch (const Error& e) {
        send_error(res, {400, stage, e.what()});
      } catch (const std::exception& e) {
        send_error(res, {500, stage, e.what()});
      }
    };
  }

  // ------------------------------------------------------------ loading

  std::filesystem::path resolve_ref(const std::string& ref) const {
    const auto root = std::filesystem::weakly_canonical(options.data_dir);
    const auto path = std::filesystem::weakly_canonical(root / ref);
    const auto rel = path.lexically_relative(root);
    if (rel.empty() || *rel.begin() == "..") {
      throw HttpError{400, "stack", "raster reference '" + ref + "' leaves the data directory"};
    }
    return path;
  }

  void check_size(const std::string& header_text, const std::string& origin) const {
    const RasterShape shape = read_raster_shape(header_text, origin);
    const auto pixels = static_cast<std::size_t>(shape.width) * static_cast<std::size_t>(shape.height);
    if (pixels > options.max_pixels) {
      throw HttpError{413, "stack",
                      origin + " has " + std::to_string(pixels) + " pixels; the limit is " +
                          std::to_string(options.max_pixels)};
    }
  }

  BandRaster load_ref(const std::string& ref) const {
    const auto path = resolve_ref(ref);
    check_size(read_file(path), path.filename().string());
    return load_raster(path);
  }

  BandRaster load_upload(const httplib::Request& req, const std::string& which) const {
    const std::string hk = which + "_header";
    const std::string pk = which + "_payload";
    if (!req.has_file(hk) || !req.has_file(pk)) {
      throw HttpError{400, "stack", "multipart upload needs fields " + hk + " and " + pk};
    }
    const std::string header = req.get_file_value(hk).content;
    check_size(header, which);
    return parse_raster(header, req.get_file_value(pk).content, which);
  }

  void create_session(const httplib::Request& req, httplib::Response& res) {
    std::optional<BandRaster> pre, post;
    ResampleMethod method = ResampleMethod::kBilinear;
    try {
      if (req.is_multipart_form_data()) {
        pre = load_upload(req, "pre");
        post = load_upload(req, "post");
        if (req.has_file("resample")) method = parse_resample_method(req.get_file_value("resample").content);
      } else {
        json body;
        try {
          body = json::parse(req.body);
        } catch (const json::exception& e) {
          throw HttpError{400, "stack", std::string("request body is not JSON: ") + e.what()};
        }
        if (!body.is_object() || !body.contains("pre") || !body.contains("post") || !body["pre"].is_string() ||
            !body["post"].is_string()) {
          throw HttpError{400, "stack", "expected {\"pre\": <raster ref>, \"post\": <raster ref>}"};
        }
        if (body.contains("resample")) method = parse_resample_method(body["resample"].get<std::string>());
        pre = load_ref(body["pre"].get<std::string>());
        post = load_ref(body["post"].get<std::string>());
      }
    } catch (const Error& e) {
      throw HttpError{400, "stack", e.what()};
    }

    std::shared_ptr<Session> session;
    try {
      StackedInput stacked = pipeline::stack_scene(*pre, *post, method);
      StackedInput features = pipeline::expansion_features(stacked);
      PcaModel pca = pipeline::full_pca(features);
      session = std::make_shared<Session>(std::move(stacked), std::move(features), std::move(pca));
    } catch (const Error& e) {
      throw HttpError{400, "stack", e.what()};
    }
    const std::string id = new_session_id();
    {
      std::lock_guard lock(sessions_mu);
      sessions[id] = session;
    }
    send_json(res, 200, {{"session_id", id}, {"width", session->stack.width()}, {"height", session->stack.height()}});
  }

  // ------------------------------------------------------------ seeds

  void put_seeds(const httplib::Request& req, httplib::Response& res) {
    auto session = find(req.matches[1]);
    json body;
    try {
      body = json::parse(req.body);
    } catch (const json::exception& e) {
      throw HttpError{400, "seeds", std::string("request body is not JSON: ") + e.what()};
    }
    SeedSet seeds;
    try {
      const auto polygons = parse_geojson_polygons(body);
      seeds = rasterize_polygons(polygons, session->stack.width(), session->stack.height());
    } catch (const Error& e) {
      throw HttpError{422, "seeds", e.what()};
    }
    {
      std::unique_lock lock(session->mu);
      session->seeds = std::move(seeds);
      std::lock_guard cache_lock(session->cache_mu);
      session->cache.clear();
    }
    std::shared_lock lock(session->mu);
    send_json(res, 200, {{"seed_pixels", session->seeds.size()}});
  }

  // ------------------------------------------------------------ expansion

  // Caller holds session->mu (shared or unique).
  std::shared_ptr<const CachedExpansion> expansion(Session& s, double alpha, int pc, const std::string& stage) {
    try {
      pipeline::validate_expansion_params(alpha, pc);
    } catch (const InvalidArgument& e) {
      throw HttpError{422, stage, e.what()};
    }
    if (s.seeds.empty()) throw HttpError{409, stage, "no seeds: PUT seed polygons first"};
    const auto key = std::make_pair(pc, alpha);
    {
      std::lock_guard lock(s.cache_mu);
      auto it = s.cache.find(key);
      if (it != s.cache.end()) return it->second;
    }
    ExpansionResult r;
    try {
      r = pipeline::expand(s.features, s.seeds, alpha, pc, &s.pca);
    } catch (const Error& e) {
      throw HttpError{422, stage, e.what()};
    }
    auto entry = std::make_shared<const CachedExpansion>(CachedExpansion{std::move(r.mask), r.stats});
    std::lock_guard lock(s.cache_mu);
    return s.cache.emplace(key, entry).first->second;
  }

  void get_expansion(const httplib::Request& req, httplib::Response& res) {
    auto session = find(req.matches[1]);
    const double alpha = parse_alpha(req, "expand");
    const int pc = parse_pc(req, "expand");
    std::shared_lock lock(session->mu);
    const auto e = expansion(*session, alpha, pc, "expand");
    send_json(res, 200, {{"mask", to_json(rle_encode(e->mask))}, {"stats", to_json(e->stats)}});
  }

  // ------------------------------------------------------------ preview

  void get_preview(const httplib::Request& req, httplib::Response& res) {
    auto session = find(req.matches[1]);
    const std::string layer = req.has_param("layer") ? req.get_param_value("layer") : "post";
    if (layer != "pre" && layer != "post" && layer != "expansion" && layer != "overlay") {
      throw HttpError{400, "preview", "unknown layer '" + layer + "' (expected pre|post|expansion|overlay)"};
    }
    std::shared_lock lock(session->mu);
    const BandRaster& r = session->stack.raster();
    const int half = StackedInput::kHalfBands;
    Rgb8Image img;
    if (layer == "pre") {
      img = render_bands(r, 0, 1, 2);
    } else if (layer == "post") {
      img = render_bands(r, half, half + 1, half + 2);
    } else {
      const auto e = expansion(*session, parse_alpha(req, "preview"), parse_pc(req, "preview"), "preview");
      if (layer == "expansion") {
        img = Rgb8Image(r.width, r.height);
        for (std::size_t i = 0; i < e->mask.size(); ++i) {
          const std::uint8_t v = e->mask.values[i] ? 255 : 0;
          img.pixels[i * 3] = img.pixels[i * 3 + 1] = img.pixels[i * 3 + 2] = v;
        }
      } else {
        img = render_bands(r, half, half + 1, half + 2);
        static constexpr std::uint8_t kRed[3] = {255, 0, 0};
        for (std::size_t i = 0; i < e->mask.size(); ++i) {
          if (!e->mask.values[i]) continue;
          for (int c = 0; c < 3; ++c) {
            auto& px = img.pixels[i * 3 + c];
            px = static_cast<std::uint8_t>((static_cast<int>(px) + kRed[c] + 1) / 2);
          }
        }
      }
    }
    res.status = 200;
    res.set_content(encode_png(img), "image/png");
  }

  // ------------------------------------------------------------ export

  void post_export(const httplib::Request& req, httplib::Response& res) {
    const std::string id = req.matches[1];
    auto session = find(id);
    const double alpha = parse_alpha(req, "export");
    const int pc = parse_pc(req, "export");
    const std::string name = req.has_param("name") ? req.get_param_value("name") : "labels";
    if (!valid_export_name(name)) {
      throw HttpError{422, "export", "export name must match [A-Za-z0-9_-]{1,64}"};
    }
    std::unique_lock lock(session->mu);
    const auto e = expansion(*session, alpha, pc, "export");
    const BandRaster raster = mask_to_raster(e->mask);
    ExportFiles files{name, raster_header_text(raster, name + ".bin"), raster_payload_bytes(raster)};
    const std::string base = "/api/sessions/" + id + "/export/";
    json body{{"header_name", name + ".json"},
              {"header", files.header},
              {"payload_name", name + ".bin"},
              {"payload_url", base + name + ".bin"},
              {"header_url", base + name + ".json"},
              {"stats", to_json(e->stats)}};
    session->last_export = std::move(files);
    send_json(res, 200, body);
  }

  void get_export_file(const httplib::Request& req, httplib::Response& res) {
    auto session = find(req.matches[1]);
    const std::string file = req.matches[2];
    std::shared_lock lock(session->mu);
    if (!session->last_export) throw HttpError{409, "export", "nothing exported yet"};
    const ExportFiles& f = *session->last_export;
    if (file == f.name + ".bin") {
      res.set_content(f.payload, "application/octet-stream");
    } else if (file == f.name + ".json") {
      res.set_content(f.header, "application/json");
    } else {
      throw HttpError{404, "export", "no exported file named '" + file + "'"};
    }
    res.status = 200;
  }

  void register_routes() {
    server.Post("/api/sessions", guarded("stack", [this](const auto& q, auto& r) { create_session(q, r); }));
    server.Put(R"(/api/sessions/([^/]+)/seeds)", guarded("seeds", [this](const auto& q, auto& r) { put_seeds(q, r); }));
    server.Get(R"(/api/sessions/([^/]+)/expansion)",
               guarded("expand", [this](const auto& q, auto& r) { get_expansion(q, r); }));
    server.Get(R"(/api/sessions/([^/]+)/preview\.png)",
               guarded("preview", [this](const auto& q, auto& r) { get_preview(q, r); }));
    server.Post(R"(/api/sessions/([^/]+)/export)",
                guarded("export", [this](const auto& q, auto& r) { post_export(q, r); }));
    server.Get(R"(/api/sessions/([^/]+)/export/([^/]+))",
               guarded("export", [this](const auto& q, auto& r) { get_export_file(q, r); }));
    server.Get("/api/health", [](const httplib::Request&, httplib::Response& r) { send_json(r, 200, {{"ok", true}}); });
  }

  void bind() {
    if (bound) return;
    if (options.port == 0) {
      port = server.bind_to_any_port(options.host);
      if (port < 0) throw Error("could not bind " + options.host + " on any port");
    } else {
      if (!server.bind_to_port(options.host, options.port)) {
        throw Error("could not bind " + options.host + ":" + std::to_string(options.port));
      }
      port = options.port;
    }
    bound = true;
  }
};

AnnotationService::AnnotationService(ServiceOptions options) : impl_(std::make_unique<Impl>(std::move(options))) {}

AnnotationService::~AnnotationService() { stop(); }

int AnnotationService::start() {
  impl_->bind();
  impl_->thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return impl_->port;
}

void AnnotationService::listen_blocking() {
  impl_->bind();
  impl_->server.listen_after_bind();
}

void AnnotationService::stop() {
  if (!impl_) return;
  impl_->server.stop();
  if (impl_->thread.joinable()) impl_->thread.join();
}

}  // namespace changeseg
