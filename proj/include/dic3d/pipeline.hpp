#pragma once

// Command layer behind the dic3d executable: JSON configuration, the six
// subcommands and the run manifest each one writes.

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "dic3d/cloud.hpp"
#include "dic3d/correlation.hpp"
#include "dic3d/detail/parallel.hpp"
#include "dic3d/detail/text.hpp"
#include "dic3d/error.hpp"
#include "dic3d/fields.hpp"
#include "dic3d/harness.hpp"
#include "dic3d/imaging.hpp"
#include "dic3d/stereo.hpp"
#include "json.hpp"

namespace dic3d::pipeline {

namespace fs = std::filesystem;
using Json = nlohmann::ordered_json;

inline constexpr const char* kVersion = "0.1.0";

inline const std::vector<std::string>& command_names() {
  static const std::vector<std::string> names = {"synthesize", "correlate", "gauge", "profile", "scan-compare",
                                                 "deadload"};
  return names;
}

struct RunOptions {
  std::string config_path;
  std::string out_dir;
  std::optional<std::uint64_t> seed;
  unsigned threads = 1;  ///< 0 = all hardware threads
  bool verbose = false;
  std::ostream* log = &std::cerr;
};

struct OutputFile {
  std::string path;  ///< relative to the output directory
  std::uintmax_t bytes = 0;
  std::string fnv1a64;
};

struct RunResult {
  std::string command;
  fs::path out_dir;
  std::vector<OutputFile> outputs;  ///< manifest.json excluded
  std::string config_digest;
  std::string outputs_digest;
  Json summary;  ///< headline numbers of the run
};

namespace detail {

/// Typed access to one JSON object; problems are collected, not thrown.
class Section {
 public:
  Section(const nlohmann::json* j, std::string path, std::vector<std::string>* issues, fs::path base)
      : j_(j), path_(std::move(path)), issues_(issues), base_(std::move(base)) {
    if (j_ && !j_->is_object()) {
      issue(path_ + " must be an object");
      j_ = nullptr;
    }
  }

  bool present() const { return j_ != nullptr; }
  bool has(const char* key) const { return j_ && j_->contains(key) && !(*j_)[key].is_null(); }
  std::string key_path(const char* key) const { return path_ + "." + key; }
  void issue(std::string msg) const { issues_->push_back(std::move(msg)); }
  const fs::path& base() const { return base_; }
  const nlohmann::json* raw(const char* key) const { return has(key) ? &(*j_)[key] : nullptr; }

  Section child(const char* key) const { return Section(raw(key), key_path(key), issues_, base_); }

  void allow(std::initializer_list<const char*> keys) const {
    if (!j_) return;
    for (const auto& [k, v] : j_->items())
      if (std::none_of(keys.begin(), keys.end(), [&](const char* a) { return k == a; }))
        issue(key_path(k.c_str()) + " is not a recognised key");
  }

  double number(const char* key, double def) const {
    const auto* v = raw(key);
    if (!v) return def;
    if (!v->is_number()) {
      issue(key_path(key) + " must be a number");
      return def;
    }
    return v->get<double>();
  }

  std::optional<double> opt_number(const char* key) const {
    if (!has(key)) return std::nullopt;
    return number(key, 0.0);
  }

  long long integer(const char* key, long long def) const {
    const auto* v = raw(key);
    if (!v) return def;
    if (!v->is_number_integer()) {
      issue(key_path(key) + " must be an integer");
      return def;
    }
    return v->get<long long>();
  }

  std::uint64_t u64(const char* key, std::uint64_t def) const {
    const auto* v = raw(key);
    if (!v) return def;
    if (!v->is_number_unsigned()) {
      issue(key_path(key) + " must be a non-negative integer");
      return def;
    }
    return v->get<std::uint64_t>();
  }

  std::string string(const char* key, const std::string& def) const {
    const auto* v = raw(key);
    if (!v) return def;
    if (!v->is_string()) {
      issue(key_path(key) + " must be a string");
      return def;
    }
    return v->get<std::string>();
  }

  bool boolean(const char* key, bool def) const {
    const auto* v = raw(key);
    if (!v) return def;
    if (!v->is_boolean()) {
      issue(key_path(key) + " must be true or false");
      return def;
    }
    return v->get<bool>();
  }

  std::optional<std::vector<double>> numbers(const char* key, std::size_t n) const {
    const auto* v = raw(key);
    if (!v) return std::nullopt;
    if (!v->is_array() || v->size() != n || !std::all_of(v->begin(), v->end(), [](const auto& e) { return e.is_number(); })) {
      issue(key_path(key) + " must be a list of " + std::to_string(n) + " numbers");
      return std::nullopt;
    }
    return v->get<std::vector<double>>();
  }

  std::vector<std::string> strings(const char* key) const {
    const auto* v = raw(key);
    if (!v) return {};
    if (!v->is_array() || !std::all_of(v->begin(), v->end(), [](const auto& e) { return e.is_string(); })) {
      issue(key_path(key) + " must be a list of strings");
      return {};
    }
    return v->get<std::vector<std::string>>();
  }

  fs::path resolve(const std::string& p) const {
    const fs::path path(p);
    return path.is_absolute() ? path : base_ / path;
  }

  /// Resolved path of an existing regular file; empty when absent or missing.
  std::string file(const char* key, bool required) const {
    if (!has(key)) {
      if (required) issue(key_path(key) + " is required");
      return {};
    }
    const std::string s = string(key, "");
    if (s.empty()) return {};
    const fs::path p = resolve(s);
    if (!fs::is_regular_file(p)) {
      issue(key_path(key) + ": file not found: " + p.string());
      return {};
    }
    return p.string();
  }

  std::string directory(const char* key, bool required) const {
    if (!has(key)) {
      if (required) issue(key_path(key) + " is required");
      return {};
    }
    const std::string s = string(key, "");
    if (s.empty()) return {};
    const fs::path p = resolve(s);
    if (!fs::is_directory(p)) {
      issue(key_path(key) + ": directory not found: " + p.string());
      return {};
    }
    return p.string();
  }

  std::vector<std::string> files(const char* key) const {
    std::vector<std::string> out;
    const auto list = strings(key);
    for (std::size_t i = 0; i < list.size(); ++i) {
      const fs::path p = resolve(list[i]);
      if (!fs::is_regular_file(p)) issue(key_path(key) + "[" + std::to_string(i) + "]: file not found: " + p.string());
      else out.push_back(p.string());
    }
    return out;
  }

 private:
  const nlohmann::json* j_;
  std::string path_;
  std::vector<std::string>* issues_;
  fs::path base_;
};

/// Regular files in `dir` with the given extension, sorted by name.
inline std::vector<std::string> list_files(const fs::path& dir, const std::string& ext) {
  std::vector<std::string> out;
  if (!fs::is_directory(dir)) return out;
  for (const auto& e : fs::directory_iterator(dir))
    if (e.is_regular_file() && e.path().extension() == ext) out.push_back(e.path().string());
  std::sort(out.begin(), out.end());
  return out;
}

inline std::string frame_name(const std::string& stem, int k, const std::string& ext) {
  std::string num = std::to_string(k);
  if (num.size() < 4) num.insert(0, 4 - num.size(), '0');
  return stem + "_" + num + ext;
}

[[noreturn]] inline void rethrow_tagged(const Error& e, const std::string& stage) {
  const std::string tag = "[" + stage + "] ";
  switch (e.kind()) {
    case ErrorKind::config: {
      const auto* ce = dynamic_cast<const ConfigError*>(&e);
      if (ce && !ce->issues().empty()) {
        auto issues = ce->issues();
        for (auto& i : issues) i = tag + i;
        throw ConfigError(std::move(issues));
      }
      throw ConfigError(tag + e.what());
    }
    case ErrorKind::numerical: throw NumericalError(tag + e.what());
    case ErrorKind::io: throw IoError(tag + e.what());
  }
  throw IoError(tag + e.what());
}

/// Output directory bookkeeping: every file written is digested for the manifest.
class Run {
 public:
  Run(std::string command, const RunOptions& opt)
      : opt_(opt), threads_(opt.threads == 0 ? std::max(1u, std::thread::hardware_concurrency()) : opt.threads) {
    result_.command = std::move(command);
    if (opt.out_dir.empty()) throw ConfigError("--out is required");
    result_.out_dir = opt.out_dir;
  }

  unsigned threads() const noexcept { return threads_; }
  Json& parameters() { return parameters_; }
  Json& summary() { return result_.summary; }

  void log(const std::string& msg) const {
    if (opt_.verbose && opt_.log) *opt_.log << "dic3d " << result_.command << ": " << msg << '\n';
  }

  template <class F>
  decltype(auto) stage(const std::string& name, F&& f) {
    log("stage " + name);
    const auto t0 = std::chrono::steady_clock::now();
    struct Timer {
      Json& timings;
      std::string name;
      std::chrono::steady_clock::time_point t0;
      ~Timer() {
        timings[name] = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      }
    } timer{timings_, name, t0};
    try {
      return f();
    } catch (const Error& e) {
      rethrow_tagged(e, result_.command + ":" + name);
    }
  }

  fs::path prepare(const std::string& rel) {
    const fs::path p = result_.out_dir / rel;
    std::error_code ec;
    fs::create_directories(p.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + p.parent_path().string() + ": " + ec.message());
    return p;
  }

  void text(const std::string& rel, const std::string& content) {
    dic3d::detail::write_text(prepare(rel).string(), content);
    record(rel, content);
  }

  void image(const std::string& rel, const GrayImage& img) {
    const fs::path p = prepare(rel);
    write_image(img, p.string());
    record(rel, dic3d::detail::read_text(p.string()));
  }

  void set_config_digest(const std::string& d) { result_.config_digest = d; }

  RunResult finish() {
    std::string lines;
    for (const auto& o : result_.outputs) lines += o.path + '\t' + o.fnv1a64 + '\n';
    result_.outputs_digest = dic3d::detail::hex64(dic3d::detail::fnv1a(lines));
    Json m;
    m["tool"] = "dic3d";
    m["version"] = kVersion;
    m["command"] = result_.command;
    m["config_digest"] = result_.config_digest;
    m["threads"] = threads_;
    m["parameters"] = parameters_;
    m["summary"] = result_.summary;
    m["timings_s"] = timings_;
    Json files = Json::array();
    for (const auto& o : result_.outputs) files.push_back({{"path", o.path}, {"bytes", o.bytes}, {"fnv1a64", o.fnv1a64}});
    m["outputs"] = files;
    m["outputs_digest"] = result_.outputs_digest;
    dic3d::detail::write_text(prepare("manifest.json").string(), m.dump(2) + "\n");
    log("wrote " + std::to_string(result_.outputs.size()) + " files, outputs digest " + result_.outputs_digest);
    return result_;
  }

 private:
  void record(const std::string& rel, const std::string& bytes) {
    result_.outputs.push_back({rel, bytes.size(), dic3d::detail::hex64(dic3d::detail::fnv1a(bytes))});
  }

  const RunOptions& opt_;
  unsigned threads_;
  RunResult result_;
  Json parameters_ = Json::object();
  Json timings_ = Json::object();
};

struct LoadedConfig {
  nlohmann::json root;
  fs::path base;
  std::string digest;
};

inline LoadedConfig load_config(const RunOptions& opt, const std::string& command) {
  if (opt.config_path.empty()) throw ConfigError("--config is required");
  LoadedConfig c;
  const std::string text = dic3d::detail::read_text(opt.config_path);
  try {
    c.root = nlohmann::json::parse(text);
  } catch (const nlohmann::json::parse_error& e) {
    throw ConfigError(opt.config_path + ": invalid JSON: " + e.what());
  }
  if (!c.root.is_object()) throw ConfigError(opt.config_path + ": top level must be an object");
  c.base = fs::absolute(opt.config_path).parent_path();
  std::string canonical = command + '\n' + c.root.dump();
  if (opt.seed) canonical += "\nseed=" + std::to_string(*opt.seed);
  c.digest = dic3d::detail::hex64(dic3d::detail::fnv1a(canonical));
  return c;
}

inline void throw_if(std::vector<std::string>& issues) {
  if (!issues.empty()) throw ConfigError(std::move(issues));
}

inline Json vec_json(const Eigen::Vector3d& v) { return Json::array({v.x(), v.y(), v.z()}); }

}  // namespace detail

// ---------------------------------------------------------------------------
// synthesize

/// Scenario from a `scenario` config block; issues are appended.
inline harness::Scenario scenario_from_config(const detail::Section& s, std::optional<std::uint64_t> seed_override) {
  harness::Scenario sc;
  s.allow({"family", "frames", "fps", "ramp_s", "noise_sigma", "seed", "scene", "speckle", "state"});
  if (!s.has("family")) s.issue(s.key_path("family") + " is required");
  const std::string family = s.string("family", "static");
  try {
    sc.family = harness::family_from_string(family);
  } catch (const ConfigError& e) {
    s.issue(s.key_path("family") + ": " + e.what());
  }
  sc.frames = static_cast<int>(s.integer("frames", sc.frames));
  sc.fps = s.number("fps", sc.fps);
  sc.ramp_s = s.number("ramp_s", sc.ramp_s);
  sc.noise_sigma = s.number("noise_sigma", sc.noise_sigma);
  sc.seed = seed_override ? *seed_override : s.u64("seed", sc.seed);

  const auto g = s.child("scene");
  g.allow({"included_angle_deg", "standoff_mm", "focal_px", "width", "height", "k1", "k2"});
  sc.geometry.included_angle_deg = g.number("included_angle_deg", sc.geometry.included_angle_deg);
  sc.geometry.standoff_mm = g.number("standoff_mm", sc.geometry.standoff_mm);
  sc.geometry.focal_px = g.number("focal_px", sc.geometry.focal_px);
  sc.geometry.width = static_cast<int>(g.integer("width", sc.geometry.width));
  sc.geometry.height = static_cast<int>(g.integer("height", sc.geometry.height));
  sc.geometry.k1 = g.number("k1", sc.geometry.k1);
  sc.geometry.k2 = g.number("k2", sc.geometry.k2);

  const auto sp = s.child("speckle");
  sp.allow({"density", "radius_px", "radius_jitter", "contrast", "edge_sigma_px", "position_jitter"});
  sc.speckle.density = sp.number("density", sc.speckle.density);
  sc.speckle.radius_px = sp.number("radius_px", sc.speckle.radius_px);
  sc.speckle.radius_jitter = sp.number("radius_jitter", sc.speckle.radius_jitter);
  sc.speckle.contrast = sp.number("contrast", sc.speckle.contrast);
  sc.speckle.edge_sigma_px = sp.number("edge_sigma_px", sc.speckle.edge_sigma_px);
  sc.speckle.position_jitter = sp.number("position_jitter", sc.speckle.position_jitter);
  sc.speckle.rng_seed = dic3d::detail::splitmix64(sc.seed);

  sc.target = harness::family_default(sc.family);
  const auto st = s.child("state");
  st.allow({"u_mm", "v_mm", "w_mm", "exx_ue", "eyy_ue", "exy_ue", "rotation_rad", "bow_um", "bow_radius_mm",
            "bow_center_mm"});
  auto& t = sc.target;
  t.u_mm = st.number("u_mm", t.u_mm);
  t.v_mm = st.number("v_mm", t.v_mm);
  t.w_mm = st.number("w_mm", t.w_mm);
  t.exx = st.number("exx_ue", t.exx * 1e6) * 1e-6;
  t.eyy = st.number("eyy_ue", t.eyy * 1e6) * 1e-6;
  t.exy = st.number("exy_ue", t.exy * 1e6) * 1e-6;
  t.rotation_rad = st.number("rotation_rad", t.rotation_rad);
  t.bow_mm = st.number("bow_um", t.bow_mm * 1e3) * 1e-3;
  t.bow_radius_mm = st.number("bow_radius_mm", t.bow_radius_mm);
  if (const auto c = st.numbers("bow_center_mm", 2)) t.bow_center = {(*c)[0], (*c)[1]};
  for (const auto& i : sc.issues()) s.issue(i);
  return sc;
}

inline Json scenario_to_json(const harness::Scenario& sc) {
  Json j;
  j["family"] = harness::to_string(sc.family);
  j["frames"] = sc.frames;
  j["fps"] = sc.fps;
  j["ramp_s"] = sc.ramp_s;
  j["noise_sigma"] = sc.noise_sigma;
  j["seed"] = sc.seed;
  const auto& g = sc.geometry;
  j["scene"] = {{"included_angle_deg", g.included_angle_deg}, {"standoff_mm", g.standoff_mm}, {"focal_px", g.focal_px},
                {"width", g.width}, {"height", g.height}, {"k1", g.k1}, {"k2", g.k2}};
  const auto& sp = sc.speckle;
  j["speckle"] = {{"density", sp.density}, {"radius_px", sp.radius_px}, {"radius_jitter", sp.radius_jitter},
                  {"contrast", sp.contrast}, {"edge_sigma_px", sp.edge_sigma_px},
                  {"position_jitter", sp.position_jitter}};
  const auto& t = sc.target;
  j["state"] = {{"u_mm", t.u_mm},
                {"v_mm", t.v_mm},
                {"w_mm", t.w_mm},
                {"exx_ue", t.exx * 1e6},
                {"eyy_ue", t.eyy * 1e6},
                {"exy_ue", t.exy * 1e6},
                {"rotation_rad", t.rotation_rad},
                {"bow_um", t.bow_mm * 1e3},
                {"bow_radius_mm", t.bow_radius_mm},
                {"bow_center_mm", Json::array({t.bow_center.x(), t.bow_center.y()})}};
  return j;
}

inline harness::ScanPairSpec scan_pair_from_config(const detail::Section& s) {
  harness::ScanPairSpec c;
  s.allow({"enabled", "size_mm", "pitch_mm", "bump_height_mm", "bump_sigma_mm", "bump_center_mm", "markers",
           "noise_mm", "max_rotation_rad", "max_translation_mm"});
  c.size_mm = s.number("size_mm", c.size_mm);
  c.pitch_mm = s.number("pitch_mm", c.pitch_mm);
  c.bump_height_mm = s.number("bump_height_mm", c.bump_height_mm);
  c.bump_sigma_mm = s.number("bump_sigma_mm", c.bump_sigma_mm);
  if (const auto v = s.numbers("bump_center_mm", 2)) c.bump_center = {(*v)[0], (*v)[1]};
  c.markers = static_cast<int>(s.integer("markers", c.markers));
  c.noise_mm = s.number("noise_mm", c.noise_mm);
  c.max_rotation_rad = s.number("max_rotation_rad", c.max_rotation_rad);
  c.max_translation_mm = s.number("max_translation_mm", c.max_translation_mm);
  for (const auto& i : c.issues()) s.issue(i);
  return c;
}

/// Stereo frames (cam0/, cam1/), the exact rig, per-frame truth and, when a
/// `clouds` block is enabled, a reference/test scan pair.
inline RunResult cmd_synthesize(const RunOptions& opt) {
  detail::Run run("synthesize", opt);
  const auto cfg = detail::load_config(opt, "synthesize");
  run.set_config_digest(cfg.digest);
  std::vector<std::string> issues;
  const detail::Section root(&cfg.root, "config", &issues, cfg.base);
  root.allow({"scenario", "clouds"});
  const detail::Section scen = root.child("scenario");
  if (!scen.present()) issues.push_back("config.scenario is required");
  const auto sc = scenario_from_config(scen, opt.seed);
  const detail::Section clouds = root.child("clouds");
  const bool want_clouds = clouds.present() && clouds.boolean("enabled", true);
  const auto pair_spec = want_clouds ? scan_pair_from_config(clouds) : harness::ScanPairSpec{};
  detail::throw_if(issues);

  run.parameters()["scenario"] = scenario_to_json(sc);
  const auto renderer = run.stage("texture", [&] { return std::make_unique<harness::ScenarioRenderer>(sc, run.threads()); });
  run.stage("render", [&] {
    for (int k = 0; k < sc.frames; ++k) {
      for (int cam = 0; cam < 2; ++cam)
        run.image("cam" + std::to_string(cam) + "/" + detail::frame_name("frame", k, ".pgm"), renderer->frame(cam, k));
      run.log("frame " + std::to_string(k + 1) + "/" + std::to_string(sc.frames));
    }
  });
  run.stage("truth", [&] {
    run.text("rig.json", rig_to_json(renderer->scene().rig()));
    run.text("truth.csv", harness::truth_csv(sc));
    run.text("scenario.json", scenario_to_json(sc).dump(2) + "\n");
  });
  run.summary()["frames"] = sc.frames;
  run.summary()["seed"] = sc.seed;
  if (want_clouds) {
    run.stage("clouds", [&] {
      const auto pair = harness::synthesize_scan_pair(pair_spec, sc.seed);
      run.text("clouds/reference.ply", ply_to_string(pair.reference));
      run.text("clouds/test.ply", ply_to_string(pair.test));
      Json truth;
      truth["test_to_reference"] = {{"R", Json::array()}, {"t", detail::vec_json(pair.test_to_reference.t)}};
      for (int r = 0; r < 3; ++r)
        truth["test_to_reference"]["R"].push_back(Json::array(
            {pair.test_to_reference.R(r, 0), pair.test_to_reference.R(r, 1), pair.test_to_reference.R(r, 2)}));
      truth["bump_height_mm"] = pair_spec.bump_height_mm;
      truth["bump_sigma_mm"] = pair_spec.bump_sigma_mm;
      truth["bump_center_mm"] = Json::array({pair_spec.bump_center.x(), pair_spec.bump_center.y()});
      run.text("clouds/truth.json", truth.dump(2) + "\n");
    });
    run.parameters()["clouds"] = {{"size_mm", pair_spec.size_mm},     {"pitch_mm", pair_spec.pitch_mm},
                                  {"markers", pair_spec.markers},     {"noise_mm", pair_spec.noise_mm},
                                  {"bump_height_mm", pair_spec.bump_height_mm}};
  }
  return run.finish();
}

// ---------------------------------------------------------------------------
// correlate

inline CorrelationConfig correlation_from_config(const detail::Section& s) {
  CorrelationConfig c;
  s.allow({"subset_px", "step_px", "max_iters", "convergence_tol", "znssd_valid_max", "min_subset_std",
           "search_radius_px"});
  c.subset_px = static_cast<int>(s.integer("subset_px", c.subset_px));
  c.step_px = static_cast<int>(s.integer("step_px", c.step_px));
  c.max_iters = static_cast<int>(s.integer("max_iters", c.max_iters));
  c.convergence_tol = s.number("convergence_tol", c.convergence_tol);
  c.znssd_valid_max = s.number("znssd_valid_max", c.znssd_valid_max);
  c.min_subset_std = s.number("min_subset_std", c.min_subset_std);
  c.search_radius_px = static_cast<int>(s.integer("search_radius_px", c.search_radius_px));
  for (const auto& i : c.issues()) s.issue(s.key_path(i.c_str()));
  return c;
}

inline Json correlation_to_json(const CorrelationConfig& c) {
  return {{"subset_px", c.subset_px},         {"step_px", c.step_px},
          {"max_iters", c.max_iters},         {"convergence_tol", c.convergence_tol},
          {"znssd_valid_max", c.znssd_valid_max}, {"min_subset_std", c.min_subset_std},
          {"search_radius_px", c.search_radius_px}};
}

/// Displacement fields for a frame sequence: 3D from a camera pair and rig,
/// or 2D from cam0 alone. One CSV per frame under fields/.
inline RunResult cmd_correlate(const RunOptions& opt) {
  detail::Run run("correlate", opt);
  const auto cfg = detail::load_config(opt, "correlate");
  run.set_config_digest(cfg.digest);
  std::vector<std::string> issues;
  const detail::Section root(&cfg.root, "config", &issues, cfg.base);
  root.allow({"correlate"});
  const detail::Section s = root.child("correlate");
  if (!s.present()) issues.push_back("config.correlate is required");
  s.allow({"input", "cam0", "cam1", "rig", "mode", "roi", "fps", "correlation", "cross_search_radius_px",
           "seed_point"});

  std::vector<std::string> cam0, cam1;
  std::string rig_path;
  double fps = 2.0;
  const std::string input = s.directory("input", false);
  if (!input.empty()) {
    cam0 = detail::list_files(fs::path(input) / "cam0", ".pgm");
    cam1 = detail::list_files(fs::path(input) / "cam1", ".pgm");
    if (cam0.empty()) issues.push_back(s.key_path("input") + ": no cam0/*.pgm frames in " + input);
    if (fs::is_regular_file(fs::path(input) / "rig.json")) rig_path = (fs::path(input) / "rig.json").string();
    const fs::path scen = fs::path(input) / "scenario.json";
    if (fs::is_regular_file(scen)) {
      try {
        const auto j = nlohmann::json::parse(dic3d::detail::read_text(scen.string()));
        if (j.contains("fps") && j["fps"].is_number()) fps = j["fps"].get<double>();
      } catch (const nlohmann::json::exception& e) {
        issues.push_back(scen.string() + ": invalid JSON: " + e.what());
      }
    }
  }
  if (s.has("cam0")) cam0 = s.files("cam0");
  if (s.has("cam1")) cam1 = s.files("cam1");
  if (s.has("rig")) rig_path = s.file("rig", true);
  const std::string default_mode = (!rig_path.empty() || s.has("rig") || !cam1.empty()) ? "3d" : "2d";
  const std::string mode = s.string("mode", default_mode);
  if (mode != "3d" && mode != "2d") issues.push_back(s.key_path("mode") + " must be 3d or 2d");
  if (input.empty() && !s.has("cam0")) issues.push_back(s.key_path("cam0") + " or " + s.key_path("input") + " is required");
  if (mode == "3d") {
    if (rig_path.empty() && !s.has("rig")) issues.push_back(s.key_path("rig") + " is required for 3d correlation");
    if (cam1.size() != cam0.size())
      issues.push_back("frame lists differ in length: cam0 has " + std::to_string(cam0.size()) + ", cam1 has " +
                       std::to_string(cam1.size()));
  }
  fps = s.number("fps", fps);
  if (!(fps > 0.0)) issues.push_back(s.key_path("fps") + " must be > 0");
  const auto corr = correlation_from_config(s.child("correlation"));
  const long long cross_radius = s.integer("cross_search_radius_px", 40);
  if (cross_radius < 0) issues.push_back(s.key_path("cross_search_radius_px") + " must be >= 0");
  std::optional<Roi> roi;
  if (const auto r = s.numbers("roi", 4)) {
    roi = Roi{static_cast<int>((*r)[0]), static_cast<int>((*r)[1]), static_cast<int>((*r)[2]), static_cast<int>((*r)[3])};
    if (!(roi->x1 > roi->x0 && roi->y1 > roi->y0 && roi->x0 >= 0 && roi->y0 >= 0))
      issues.push_back(s.key_path("roi") + " must be [x0, y0, x1, y1] with 0 <= x0 < x1 and 0 <= y0 < y1");
  }
  std::optional<LatticeIndex> seed_point;
  if (const auto p = s.numbers("seed_point", 2)) seed_point = LatticeIndex{static_cast<int>((*p)[0]), static_cast<int>((*p)[1])};
  detail::throw_if(issues);

  const GrayImage first = run.stage("load", [&] { return read_image(cam0.front()); });
  const Roi area = roi.value_or(Roi::whole(first));
  run.parameters()["mode"] = mode;
  run.parameters()["frames"] = cam0.size();
  run.parameters()["fps"] = fps;
  run.parameters()["roi"] = Json::array({area.x0, area.y0, area.x1, area.y1});
  run.parameters()["correlation"] = correlation_to_json(corr);

  std::string frames_csv = "frame,t_s,valid_points,total_points\n";
  std::size_t last_valid = 0, total = 0;
  if (mode == "3d") {
    run.parameters()["cross_search_radius_px"] = cross_radius;
    const StereoRig rig = run.stage("rig", [&] { return read_rig(rig_path); });
    ReconstructionOptions ro;
    ro.threads = run.threads();
    ro.fps = fps;
    ro.cross_search_radius_px = static_cast<int>(cross_radius);
    ro.seed = seed_point;
    run.stage("reconstruct", [&] {
      reconstruct_sequence(
          rig, [&](std::size_t i) { return i == 0 ? first : read_image(cam0[i]); },
          [&](std::size_t i) { return read_image(cam1[i]); }, cam0.size(), area, corr, ro, [&](StereoFrame&& f) {
            const Field3D& fld = f.field;
            run.text("fields/" + detail::frame_name("field", fld.frame, ".csv"), field3d_to_csv(fld));
            frames_csv += std::to_string(fld.frame) + ',' + dic3d::detail::fmt(fld.time_s) + ',' +
                          std::to_string(fld.valid_count()) + ',' + std::to_string(fld.points.size()) + '\n';
            last_valid = fld.valid_count();
            total = fld.points.size();
            run.log("frame " + std::to_string(fld.frame + 1) + "/" + std::to_string(cam0.size()) + ": " +
                    std::to_string(last_valid) + "/" + std::to_string(total) + " valid");
          });
    });
  } else {
    run.stage("correlate", [&] {
      DisplacementField2D prev;
      for (std::size_t k = 0; k < cam0.size(); ++k) {
        const GrayImage cur = k == 0 ? first : read_image(cam0[k]);
        if (cur.width() != first.width() || cur.height() != first.height())
          throw ConfigError("frame " + std::to_string(k) + " has a different image size");
        FieldOptions fo;
        fo.threads = run.threads();
        fo.frame = static_cast<int>(k);
        fo.time_s = static_cast<double>(k) / fps;
        fo.seed = seed_point;
        if (k > 0) fo.prior = &prev;
        const SubsetMatcher m(first, cur, corr);
        DisplacementField2D f = correlate_field(m, area, fo);
        run.text("fields/" + detail::frame_name("field", f.frame, ".csv"), field_to_csv(f));
        frames_csv += std::to_string(f.frame) + ',' + dic3d::detail::fmt(f.time_s) + ',' +
                      std::to_string(f.valid_count()) + ',' + std::to_string(f.points.size()) + '\n';
        last_valid = f.valid_count();
        total = f.points.size();
        prev = std::move(f);
      }
    });
  }
  run.text("frames.csv", frames_csv);
  run.summary()["frames"] = cam0.size();
  run.summary()["lattice_points"] = total;
  run.summary()["last_frame_valid"] = last_valid;
  return run.finish();
}

// ---------------------------------------------------------------------------
// gauge

/// Strain grids from field CSVs (3D or 2D, told apart by their columns).
inline std::vector<StrainGrid> strain_grids_from_files(const std::vector<std::string>& files, int window,
                                                       unsigned threads) {
  std::vector<StrainGrid> grids(files.size());
  dic3d::detail::parallel_for(files.size(), threads, [&](std::size_t i) {
    const auto table = dic3d::detail::read_csv(files[i]);
    const auto& h = table.header;
    if (std::find(h.begin(), h.end(), "W") != h.end()) grids[i] = strain_field(field3d_from_csv(table), window);
    else if (std::find(h.begin(), h.end(), "u_px") != h.end()) grids[i] = strain_field(field_from_csv(table), window);
    else throw IoError(files[i] + ": not a displacement field CSV");
  });
  return grids;
}

inline std::vector<std::string> field_files(const detail::Section& s, const char* list_key, const char* dir_key) {
  if (s.has(list_key)) return s.files(list_key);
  const std::string dir = s.directory(dir_key, false);
  if (dir.empty()) {
    if (!s.has(dir_key)) s.issue(s.key_path(list_key) + " or " + s.key_path(dir_key) + " is required");
    return {};
  }
  auto files = detail::list_files(dir, ".csv");
  if (files.empty()) s.issue(s.key_path(dir_key) + ": no field CSVs in " + dir);
  return files;
}

/// Virtual gauge histories over a field sequence, with plateau statistics.
inline RunResult cmd_gauge(const RunOptions& opt) {
  detail::Run run("gauge", opt);
  const auto cfg = detail::load_config(opt, "gauge");
  run.set_config_digest(cfg.digest);
  std::vector<std::string> issues;
  const detail::Section root(&cfg.root, "config", &issues, cfg.base);
  root.allow({"gauge"});
  const detail::Section s = root.child("gauge");
  if (!s.present()) issues.push_back("config.gauge is required");
  s.allow({"fields", "fields_dir", "window", "gauges", "gauges_file", "select", "plateau_max_slope"});
  const auto files = field_files(s, "fields", "fields_dir");
  const long long window = s.integer("window", 5);
  if (window < 3 || window % 2 == 0) issues.push_back(s.key_path("window") + " must be odd and >= 3");
  const double max_slope = s.number("plateau_max_slope", 0.2);
  if (!(max_slope > 0.0)) issues.push_back(s.key_path("plateau_max_slope") + " must be > 0");
  std::vector<GaugeSpec> gauges;
  nlohmann::json gauge_json;
  if (s.has("gauges")) {
    gauge_json = *s.raw("gauges");
  } else if (const std::string gf = s.file("gauges_file", false); !gf.empty()) {
    try {
      gauge_json = nlohmann::json::parse(dic3d::detail::read_text(gf));
      if (gauge_json.is_object() && gauge_json.contains("gauges")) gauge_json = gauge_json["gauges"];
    } catch (const nlohmann::json::exception& e) {
      issues.push_back(gf + ": invalid JSON: " + e.what());
    }
  } else if (!s.has("gauges_file")) {
    issues.push_back(s.key_path("gauges") + " or " + s.key_path("gauges_file") + " is required");
  }
  if (!gauge_json.is_null()) {
    try {
      gauges = gauges_from_json(gauge_json);
    } catch (const ConfigError& e) {
      for (const auto& i : e.issues().empty() ? std::vector<std::string>{e.what()} : e.issues())
        issues.push_back("config.gauge." + i);
    }
  }
  if (s.has("select")) {
    std::vector<GaugeSpec> chosen;
    for (const auto& id : s.strings("select")) {
      const auto it = std::find_if(gauges.begin(), gauges.end(), [&](const auto& g) { return g.id == id; });
      if (it == gauges.end()) issues.push_back(s.key_path("select") + ": unknown gauge id '" + id + "'");
      else chosen.push_back(*it);
    }
    gauges = std::move(chosen);
  }
  detail::throw_if(issues);

  run.parameters()["window"] = window;
  run.parameters()["plateau_max_slope"] = max_slope;
  run.parameters()["fields"] = files.size();
  Json gauge_echo = Json::array();
  for (const auto& g : gauges) gauge_echo.push_back(g.id);
  run.parameters()["gauges"] = gauge_echo;

  const auto grids = run.stage("strain", [&] { return strain_grids_from_files(files, static_cast<int>(window), run.threads()); });
  std::vector<GaugeHistory> histories(gauges.size());
  run.stage("histories", [&] {
    dic3d::detail::parallel_for(gauges.size(), run.threads(), [&](std::size_t i) {
      histories[i] = time_history(grids, gauges[i]);
    });
  });
  run.text("histories.csv", histories_to_csv(histories));

  using dic3d::detail::fmt;
  std::string plateaus = "gauge_id,plateau_found,mean,slope_per_s,stddev,count,t_start_s,t_end_s\n";
  Json sum = Json::object();
  for (const auto& h : histories) {
    try {
      const Plateau p = detect_plateau(h, max_slope);
      plateaus += h.gauge_id + ",1," + fmt(p.mean) + ',' + fmt(p.slope_per_s) + ',' + fmt(p.stddev) + ',' +
                  std::to_string(p.count) + ',' + fmt(p.t_start) + ',' + fmt(p.t_end) + '\n';
      sum[h.gauge_id] = {{"plateau_mean", p.mean}, {"plateau_slope_per_s", p.slope_per_s}};
    } catch (const NumericalError& e) {
      plateaus += h.gauge_id + ",0,,,,,,\n";
      sum[h.gauge_id] = {{"plateau", nullptr}};
      run.log(e.what());
    }
  }
  run.text("plateaus.csv", plateaus);
  run.summary()["gauges"] = sum;
  return run.finish();
}

// ---------------------------------------------------------------------------
// profile

/// Out-of-plane profile along a lattice segment of one 3D field, with a
/// low-confidence flag when a static noise floor is known.
inline RunResult cmd_profile(const RunOptions& opt) {
  detail::Run run("profile", opt);
  const auto cfg = detail::load_config(opt, "profile");
  run.set_config_digest(cfg.digest);
  std::vector<std::string> issues;
  const detail::Section root(&cfg.root, "config", &issues, cfg.base);
  root.allow({"profile"});
  const detail::Section s = root.child("profile");
  if (!s.present()) issues.push_back("config.profile is required");
  s.allow({"field", "from", "to", "samples", "noise_floor_um", "static_fields", "static_fields_dir"});
  const std::string field_path = s.file("field", true);
  const auto from = s.numbers("from", 2);
  const auto to = s.numbers("to", 2);
  const long long samples = s.integer("samples", 0);  // 0: two stations per lattice step
  const auto floor_given = s.opt_number("noise_floor_um");
  std::vector<std::string> static_files;
  if (s.has("static_fields") || s.has("static_fields_dir")) {
    if (floor_given) issues.push_back(s.key_path("noise_floor_um") + " and static fields are mutually exclusive");
    static_files = field_files(s, "static_fields", "static_fields_dir");
  }
  if (floor_given && !(*floor_given >= 0.0)) issues.push_back(s.key_path("noise_floor_um") + " must be >= 0");
  detail::throw_if(issues);

  const Field3D field = run.stage("load", [&] { return read_field3d(field_path); });
  double floor_um = floor_given.value_or(0.0);
  if (!static_files.empty()) {
    floor_um = run.stage("noise_floor", [&] {
      std::vector<Field3D> fs(static_files.size());
      dic3d::detail::parallel_for(static_files.size(), run.threads(), [&](std::size_t i) { fs[i] = read_field3d(static_files[i]); });
      return static_noise_floor_um(fs);
    });
  }
  const Eigen::Vector2d a = from ? Eigen::Vector2d((*from)[0], (*from)[1]) : Eigen::Vector2d(0, 0);
  const Eigen::Vector2d b = to ? Eigen::Vector2d((*to)[0], (*to)[1]) : Eigen::Vector2d(field.nx - 1, field.ny - 1);
  const int n = samples > 0 ? static_cast<int>(samples) : 2 * std::max(field.nx, field.ny) - 1;
  const Profile p = run.stage("profile", [&] { return out_of_plane_profile(field, a, b, n, floor_um); });

  run.parameters()["from"] = Json::array({a.x(), a.y()});
  run.parameters()["to"] = Json::array({b.x(), b.y()});
  run.parameters()["samples"] = n;
  run.parameters()["noise_floor_um"] = floor_um;
  run.parameters()["noise_floor_source"] = static_files.empty() ? (floor_given ? "config" : "none") : "static_fields";

  using dic3d::detail::fmt;
  run.text("profile.csv", profile_to_csv(p));
  run.text("profile_summary.csv",
           std::string("amplitude_um,valid_samples,samples,noise_floor_um,confidence_threshold_um,low_confidence\n") +
               fmt(p.amplitude_um) + ',' + std::to_string(p.valid_count) + ',' + std::to_string(p.samples.size()) +
               ',' + fmt(p.noise_floor_um) + ',' + fmt(p.confidence_threshold_um) + ',' +
               (p.low_confidence ? "1" : "0") + '\n');
  run.summary()["amplitude_um"] = p.amplitude_um;
  run.summary()["noise_floor_um"] = p.noise_floor_um;
  run.summary()["low_confidence"] = p.low_confidence;
  return run.finish();
}

// ---------------------------------------------------------------------------
// scan-compare

/// Marker alignment of the test scan onto the reference, then signed
/// deviations.
inline RunResult cmd_scan_compare(const RunOptions& opt) {
  detail::Run run("scan-compare", opt);
  const auto cfg = detail::load_config(opt, "scan-compare");
  run.set_config_digest(cfg.digest);
  std::vector<std::string> issues;
  const detail::Section root(&cfg.root, "config", &issues, cfg.base);
  root.allow({"scan_compare"});
  const detail::Section s = root.child("scan_compare");
  if (!s.present()) issues.push_back("config.scan_compare is required");
  s.allow({"reference", "test", "align", "max_dist_mm", "neighbors", "highlight_mm", "viewpoint"});
  const std::string ref_path = s.file("reference", true);
  const std::string test_path = s.file("test", true);
  const std::string align = s.string("align", "markers");
  if (align != "markers" && align != "none") issues.push_back(s.key_path("align") + " must be markers or none");
  DeviationOptions dopt;
  dopt.max_dist_mm = s.number("max_dist_mm", dopt.max_dist_mm);
  const long long k = s.integer("neighbors", static_cast<long long>(dopt.neighbors));
  dopt.neighbors = k > 0 ? static_cast<std::size_t>(k) : 0;
  dopt.highlight_mm = s.number("highlight_mm", dopt.highlight_mm);
  if (const auto v = s.numbers("viewpoint", 3)) dopt.viewpoint = Eigen::Vector3d((*v)[0], (*v)[1], (*v)[2]);
  for (const auto& i : dopt.issues()) issues.push_back("config.scan_compare." + i);
  detail::throw_if(issues);
  dopt.threads = run.threads();

  const PointCloud ref = run.stage("load_reference", [&] { return read_ply(ref_path); });
  const PointCloud test = run.stage("load_test", [&] { return read_ply(test_path); });
  Json alignment;
  alignment["method"] = align;
  RigidTransform T;
  if (align == "markers") {
    const Alignment a = run.stage("align", [&] { return kabsch_align(test.markers(), ref.markers()); });
    T = a.transform;
    alignment["common_markers"] = a.common_markers;
    alignment["rms_mm"] = a.rms_mm;
  }
  alignment["R"] = Json::array();
  for (int r = 0; r < 3; ++r) alignment["R"].push_back(Json::array({T.R(r, 0), T.R(r, 1), T.R(r, 2)}));
  alignment["t"] = detail::vec_json(T.t);
  const DeviationReport rep = run.stage("deviation", [&] { return cloud_deviation(ref, test, T, dopt); });

  run.parameters()["align"] = align;
  run.parameters()["max_dist_mm"] = dopt.max_dist_mm;
  run.parameters()["neighbors"] = dopt.neighbors;
  run.parameters()["highlight_mm"] = dopt.highlight_mm;
  run.parameters()["reference_points"] = ref.points.size();
  run.parameters()["test_points"] = test.points.size();

  run.text("deviation.csv", deviation_to_csv(rep));
  Json summary;
  summary["alignment"] = alignment;
  summary["deviation"] = summary_to_json(rep.summary);
  run.text("deviation_summary.json", summary.dump(2) + "\n");
  run.summary() = summary;
  return run.finish();
}

// ---------------------------------------------------------------------------
// deadload

inline BearingSpec bearing_from_config(const detail::Section& s) {
  BearingSpec b;
  s.allow({"E", "E_unit", "area", "area_unit", "tributary_dead_load", "force_unit"});
  if (!s.has("area")) s.issue(s.key_path("area") + " is required");
  b.E = s.number("E", b.E);
  b.area = s.number("area", b.area);
  b.tributary_dead_load = s.opt_number("tributary_dead_load");
  try {
    b.E_unit = units::stress_unit(s.string("E_unit", units::name(b.E_unit)));
  } catch (const ConfigError& e) {
    s.issue(s.key_path("E_unit") + ": " + e.what());
  }
  try {
    b.area_unit = units::area_unit(s.string("area_unit", units::name(b.area_unit)));
  } catch (const ConfigError& e) {
    s.issue(s.key_path("area_unit") + ": " + e.what());
  }
  try {
    b.force_unit = units::force_unit(s.string("force_unit", units::name(b.force_unit)));
  } catch (const ConfigError& e) {
    s.issue(s.key_path("force_unit") + ": " + e.what());
  }
  for (const auto& i : b.issues()) s.issue("config.deadload." + i);
  return b;
}

/// Bearing reaction back-calculated from a scalar strain or from the plateau
/// of a gauge history.
inline RunResult cmd_deadload(const RunOptions& opt) {
  detail::Run run("deadload", opt);
  const auto cfg = detail::load_config(opt, "deadload");
  run.set_config_digest(cfg.digest);
  std::vector<std::string> issues;
  const detail::Section root(&cfg.root, "config", &issues, cfg.base);
  root.allow({"deadload"});
  const detail::Section s = root.child("deadload");
  if (!s.present()) issues.push_back("config.deadload is required");
  s.allow({"strain_ue", "history", "gauge_id", "plateau_max_slope", "bearing", "share_ratio", "load"});
  const auto strain = s.opt_number("strain_ue");
  const std::string history = s.file("history", false);
  if (strain && s.has("history")) issues.push_back(s.key_path("strain_ue") + " and " + s.key_path("history") + " are mutually exclusive");
  if (!strain && !s.has("history")) issues.push_back(s.key_path("strain_ue") + " or " + s.key_path("history") + " is required");
  const std::string gauge_id = s.string("gauge_id", "");
  const double max_slope = s.number("plateau_max_slope", 0.2);
  if (!(max_slope > 0.0)) issues.push_back(s.key_path("plateau_max_slope") + " must be > 0");
  const detail::Section bs = s.child("bearing");
  if (!bs.present()) issues.push_back(s.key_path("bearing") + " is required");
  const BearingSpec bearing = bearing_from_config(bs);
  const bool want_ratio = s.boolean("share_ratio", bearing.tributary_dead_load.has_value());
  if (want_ratio && !bearing.tributary_dead_load)
    issues.push_back(s.key_path("share_ratio") + " requires bearing.tributary_dead_load");
  const auto load = s.opt_number("load");
  detail::throw_if(issues);

  using dic3d::detail::fmt_fixed;
  Json report;
  report["bearing"] = {{"E", bearing.E},
                       {"E_unit", units::name(bearing.E_unit)},
                       {"area", bearing.area},
                       {"area_unit", units::name(bearing.area_unit)},
                       {"force_unit", units::name(bearing.force_unit)}};
  if (bearing.tributary_dead_load) report["bearing"]["tributary_dead_load"] = *bearing.tributary_dead_load;

  double strain_ue = 0.0;
  if (strain) {
    strain_ue = *strain;
    report["source"] = {{"kind", "scalar"}, {"strain_ue", strain_ue}};
  } else {
    const auto hs = run.stage("history", [&] { return histories_from_csv(dic3d::detail::read_csv(history)); });
    const GaugeHistory* h = nullptr;
    if (gauge_id.empty()) {
      if (hs.size() != 1)
        throw ConfigError("config.deadload.gauge_id is required: the history holds " + std::to_string(hs.size()) + " gauges");
      h = &hs.front();
    } else {
      for (const auto& c : hs)
        if (c.gauge_id == gauge_id) h = &c;
      if (!h) throw ConfigError("config.deadload.gauge_id: unknown gauge id '" + gauge_id + "' in " + history);
    }
    const Plateau p = run.stage("plateau", [&] { return detect_plateau(*h, max_slope); });
    strain_ue = p.mean;
    report["source"] = {{"kind", "history"},
                        {"gauge_id", h->gauge_id},
                        {"records", h->records.size()},
                        {"plateau", {{"mean_ue", p.mean},
                                     {"slope_ue_per_s", p.slope_per_s},
                                     {"stddev_ue", p.stddev},
                                     {"count", p.count},
                                     {"t_start_s", p.t_start},
                                     {"t_end_s", p.t_end},
                                     {"max_slope_ue_per_s", max_slope}}}};
  }
  const Reaction r = run.stage("reaction", [&] { return back_calculate_reaction(strain_ue, bearing); });
  report["strain_ue"] = strain_ue;
  report["strain_ue_display"] = fmt_fixed(strain_ue, 1);
  report["reaction"] = {{"force", r.force},
                        {"magnitude", std::abs(r.force)},
                        {"unit", units::name(bearing.force_unit)},
                        {"display", fmt_fixed(std::abs(r.force), 3) + " " + units::name(bearing.force_unit)}};
  if (want_ratio) {
    const double ratio = dead_load_share(strain_ue, bearing);
    report["share_ratio"] = ratio;
    report["share_ratio_display"] = fmt_fixed(ratio, 3);
  }
  if (load) {
    const double e = expected_strain(*load, bearing);
    report["expected"] = {{"load", *load}, {"strain_ue", e}, {"strain_ue_display", fmt_fixed(e, 1)}};
  }
  run.parameters()["plateau_max_slope"] = max_slope;
  run.text("deadload.json", report.dump(2) + "\n");
  run.summary() = report;
  return run.finish();
}

// ---------------------------------------------------------------------------

inline RunResult run_command(const std::string& name, const RunOptions& opt) {
  if (name == "synthesize") return cmd_synthesize(opt);
  if (name == "correlate") return cmd_correlate(opt);
  if (name == "gauge") return cmd_gauge(opt);
  if (name == "profile") return cmd_profile(opt);
  if (name == "scan-compare") return cmd_scan_compare(opt);
  if (name == "deadload") return cmd_deadload(opt);
  throw ConfigError("unknown command '" + name + "'");
}

}  // namespace dic3d::pipeline
