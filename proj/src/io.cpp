// SPDX-License-Identifier: Apache-2.0
#include "moesplat/io.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <json.hpp>
#include <openssl/evp.h>
#include <png.h>

#include "moesplat/errors.hpp"

static_assert(std::endian::native == std::endian::little,
              "binary formats are written in host order and assume a little-endian host");

namespace moesplat {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::ofstream open_out(const fs::path& path) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
    if (ec) throw IoError("cannot create directory " + path.parent_path().string() + ": " + ec.message());
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot open " + path.string() + " for writing");
  return out;
}

std::ifstream open_in(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return in;
}

template <typename T>
void put(std::ostream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::istream& in, const fs::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw IoError("truncated file " + path.string());
  return v;
}

void put_doubles(std::ostream& out, const std::vector<double>& v) {
  put<std::uint64_t>(out, v.size());
  out.write(reinterpret_cast<const char*>(v.data()), static_cast<std::streamsize>(v.size() * sizeof(double)));
}

std::vector<double> get_doubles(std::istream& in, const fs::path& path, std::uint64_t limit = 1ULL << 32) {
  const auto n = get<std::uint64_t>(in, path);
  if (n > limit) throw IoError("implausible array length in " + path.string());
  std::vector<double> v(n);
  in.read(reinterpret_cast<char*>(v.data()), static_cast<std::streamsize>(n * sizeof(double)));
  if (!in) throw IoError("truncated file " + path.string());
  return v;
}

void check_written(std::ostream& out, const fs::path& path) {
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

}  // namespace

void write_text(const fs::path& path, const std::string& text) {
  auto out = open_out(path);
  out << text;
  check_written(out, path);
}

std::string read_text(const fs::path& path) {
  auto in = open_in(path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_png(const fs::path& path, const ImageBuffer& image) {
  const int c = image.channels();
  if (c != 1 && c != 3 && c != 4) throw InvalidInput("write_png: need 1, 3 or 4 channels");
  if (image.empty()) throw InvalidInput("write_png: empty image");
  std::vector<png_byte> bytes(image.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) {
    const double v = std::clamp(image.data()[i], 0.0, 1.0);
    bytes[i] = static_cast<png_byte>(std::lround(v * 255.0));
  }
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  img.width = static_cast<png_uint_32>(image.width());
  img.height = static_cast<png_uint_32>(image.height());
  img.format = c == 1 ? PNG_FORMAT_GRAY : (c == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_RGBA);
  if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("write_png " + path.string() + ": " + msg);
  }
}

ImageBuffer read_png(const fs::path& path) {
  png_image img;
  std::memset(&img, 0, sizeof(img));
  img.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&img, path.c_str())) {
    throw IoError("read_png " + path.string() + ": " + img.message);
  }
  const int c = (img.format & PNG_FORMAT_FLAG_COLOR) ? 3 : 1;
  img.format = c == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
  std::vector<png_byte> bytes(PNG_IMAGE_SIZE(img));
  if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
    const std::string msg = img.message;
    png_image_free(&img);
    throw IoError("read_png " + path.string() + ": " + msg);
  }
  ImageBuffer out(static_cast<int>(img.height), static_cast<int>(img.width), c);
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] = bytes[i] / 255.0;
  return out;
}

void write_f32(const fs::path& path, const ImageBuffer& image) {
  auto out = open_out(path);
  out.write("MSF32\0\0\0", 8);
  put<std::int32_t>(out, image.height());
  put<std::int32_t>(out, image.width());
  put<std::int32_t>(out, image.channels());
  for (double v : image.data()) put<float>(out, static_cast<float>(v));
  check_written(out, path);
}

ImageBuffer read_f32(const fs::path& path) {
  auto in = open_in(path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "MSF32\0\0\0", 8) != 0) throw IoError("not an f32 image: " + path.string());
  const auto h = get<std::int32_t>(in, path);
  const auto w = get<std::int32_t>(in, path);
  const auto c = get<std::int32_t>(in, path);
  if (h <= 0 || w <= 0 || c <= 0 || static_cast<std::int64_t>(h) * w * c > (1LL << 28)) {
    throw IoError("bad f32 image shape in " + path.string());
  }
  ImageBuffer img(h, w, c);
  for (double& v : img.data()) v = get<float>(in, path);
  return img;
}

void write_expert(const fs::path& path, const ExpertModel& e) {
  auto out = open_out(path);
  const int n = e.size();
  std::ostringstream header;
  header << "moesplat expert\n"
         << "format " << static_cast<int>(kExpertFormatVersion) << "\n"
         << "kind " << to_string(e.kind()) << "\n"
         << "order " << e.order() << "\n"
         << "latent_dim " << e.latent_dim() << "\n"
         << "hidden " << e.hidden() << "\n"
         << "element gaussian " << n << "\n"
         << "property float x y z qw qx qy qz sx sy sz opacity r g b\n"
         << "motion_values " << e.motion().size() << "\n"
         << "end_header\n";
  out << header.str();
  const auto snapshot = e.gaussians_at(0.0);
  for (const Gaussian3D& g : snapshot) {
    const double rec[14] = {g.mean.x(), g.mean.y(), g.mean.z(), g.rotation.w(), g.rotation.x(),
                            g.rotation.y(), g.rotation.z(), g.scale.x(), g.scale.y(), g.scale.z(),
                            g.opacity, g.color.x(), g.color.y(), g.color.z()};
    for (double v : rec) put<float>(out, static_cast<float>(v));
  }
  put<std::uint8_t>(out, static_cast<std::uint8_t>(e.kind()));
  put<std::uint8_t>(out, kExpertFormatVersion);
  const TrainableFlags& f = e.trainable();
  put<std::uint8_t>(out, static_cast<std::uint8_t>((f.color ? 1 : 0) | (f.opacity ? 2 : 0) | (f.motion ? 4 : 0)));
  std::vector<double> rot, scl;
  rot.reserve(4 * n);
  scl.reserve(3 * n);
  for (int i = 0; i < n; ++i) {
    const Quat& q = e.rotations()[i];
    rot.insert(rot.end(), {q.w(), q.x(), q.y(), q.z()});
    const Vec3& s = e.scales()[i];
    scl.insert(scl.end(), {s.x(), s.y(), s.z()});
  }
  put_doubles(out, rot);
  put_doubles(out, scl);
  put_doubles(out, e.color_logits());
  put_doubles(out, e.opacity_logits());
  put_doubles(out, e.motion());
  check_written(out, path);
}

ExpertModel read_expert(const fs::path& path) {
  auto in = open_in(path);
  std::string line;
  std::getline(in, line);
  if (line != "moesplat expert") throw IoError("not an expert checkpoint: " + path.string());
  int format = -1, order = 0, latent = 0, hidden = 0, n = -1;
  std::size_t motion_values = 0;
  ExpertKind kind = ExpertKind::kPolynomial;
  bool ended = false;
  while (std::getline(in, line)) {
    if (line == "end_header") {
      ended = true;
      break;
    }
    std::istringstream ls(line);
    std::string key;
    ls >> key;
    if (key == "format") ls >> format;
    else if (key == "kind") {
      std::string k;
      ls >> k;
      kind = expert_kind_from_string(k);
    } else if (key == "order") ls >> order;
    else if (key == "latent_dim") ls >> latent;
    else if (key == "hidden") ls >> hidden;
    else if (key == "element") {
      std::string what;
      ls >> what >> n;
    } else if (key == "motion_values") ls >> motion_values;
  }
  if (!ended || n < 0) throw IoError("malformed expert header in " + path.string());
  if (format != kExpertFormatVersion) throw IoError("unsupported expert format in " + path.string());
  in.seekg(static_cast<std::streamoff>(n) * 14 * sizeof(float), std::ios::cur);
  const auto tag = get<std::uint8_t>(in, path);
  const auto version = get<std::uint8_t>(in, path);
  const auto flags = get<std::uint8_t>(in, path);
  if (tag != static_cast<std::uint8_t>(kind) || version != kExpertFormatVersion) {
    throw IoError("motion section does not match header in " + path.string());
  }
  const auto rot = get_doubles(in, path);
  const auto scl = get_doubles(in, path);
  auto color = get_doubles(in, path);
  auto opacity = get_doubles(in, path);
  auto motion = get_doubles(in, path);
  const auto un = static_cast<std::size_t>(n);
  if (rot.size() != 4 * un || scl.size() != 3 * un || motion.size() != motion_values) {
    throw IoError("parameter section size mismatch in " + path.string());
  }
  std::vector<Quat> rotations;
  std::vector<Vec3> scales;
  for (std::size_t i = 0; i < un; ++i) {
    rotations.emplace_back(rot[4 * i], rot[4 * i + 1], rot[4 * i + 2], rot[4 * i + 3]);
    scales.emplace_back(scl[3 * i], scl[3 * i + 1], scl[3 * i + 2]);
  }
  ExpertModel e = ExpertModel::from_parts(kind, order, latent, hidden, std::move(rotations), std::move(scales),
                                          std::move(color), std::move(opacity), std::move(motion));
  e.set_trainable({(flags & 1) != 0, (flags & 2) != 0, (flags & 4) != 0});
  return e;
}

namespace {

void put_net(std::ostream& out, const ConvNet& net) {
  put<std::uint32_t>(out, static_cast<std::uint32_t>(net.in_channels()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(net.hidden()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(net.out_channels()));
  put_doubles(out, net.params());
}

ConvNet get_net(std::istream& in, const fs::path& path) {
  const auto ic = get<std::uint32_t>(in, path);
  const auto hc = get<std::uint32_t>(in, path);
  const auto oc = get<std::uint32_t>(in, path);
  if (ic == 0 || hc == 0 || oc == 0 || ic > 1024 || hc > 1024 || oc > 1024) {
    throw IoError("bad network shape in " + path.string());
  }
  ConvNet net(static_cast<int>(ic), static_cast<int>(hc), static_cast<int>(oc), 0);
  net.set_params(get_doubles(in, path));
  return net;
}

}  // namespace

void write_router(const fs::path& path, const RouterState& r) {
  auto out = open_out(path);
  out.write("MSROUTER", 8);
  put<std::uint8_t>(out, kRouterFormatVersion);
  put<std::uint8_t>(out, static_cast<std::uint8_t>(r.kind));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(r.expert_count()));
  switch (r.kind) {
    case RouterKind::kVolumeAware:
      for (const ExpertWeights& e : r.weights.experts) {
        put_doubles(out, e.w);
        put_doubles(out, e.w_dir);
        put_doubles(out, e.w_time);
      }
      put_net(out, r.phi);
      break;
    case RouterKind::kPixel:
      put_net(out, r.pixel_net);
      break;
    case RouterKind::kVolume:
      for (const auto& g : r.gate_logits) put_doubles(out, g);
      break;
  }
  check_written(out, path);
}

RouterState read_router(const fs::path& path) {
  auto in = open_in(path);
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, "MSROUTER", 8) != 0) throw IoError("not a router checkpoint: " + path.string());
  if (get<std::uint8_t>(in, path) != kRouterFormatVersion) throw IoError("unsupported router format: " + path.string());
  const auto kind_byte = get<std::uint8_t>(in, path);
  if (kind_byte > 2) throw IoError("unknown router kind in " + path.string());
  const auto k = get<std::uint32_t>(in, path);
  if (k == 0 || k > 4096) throw IoError("bad expert count in " + path.string());
  RouterState r;
  r.kind = static_cast<RouterKind>(kind_byte);
  switch (r.kind) {
    case RouterKind::kVolumeAware:
      for (std::uint32_t e = 0; e < k; ++e) {
        ExpertWeights w;
        w.w = get_doubles(in, path);
        w.w_dir = get_doubles(in, path);
        w.w_time = get_doubles(in, path);
        if (w.w_dir.size() != w.w.size() || w.w_time.size() != w.w.size()) {
          throw IoError("router weight arrays disagree in " + path.string());
        }
        r.weights.experts.push_back(std::move(w));
      }
      r.phi = get_net(in, path);
      break;
    case RouterKind::kPixel:
      r.pixel_net = get_net(in, path);
      if (static_cast<std::uint32_t>(r.pixel_net.out_channels()) != k) {
        throw IoError("pixel router output count mismatch in " + path.string());
      }
      break;
    case RouterKind::kVolume:
      for (std::uint32_t e = 0; e < k; ++e) r.gate_logits.push_back(get_doubles(in, path));
      break;
  }
  return r;
}

void write_moe(const fs::path& dir, const MoeModel& model) {
  fs::create_directories(dir);
  json meta;
  meta["format"] = 1;
  meta["router"] = to_string(model.router.kind);
  meta["experts"] = json::array();
  for (std::size_t k = 0; k < model.experts.size(); ++k) {
    const std::string name = "expert_" + std::to_string(k) + ".msx";
    write_expert(dir / name, model.experts[k]);
    meta["experts"].push_back({{"file", name}, {"kind", to_string(model.experts[k].kind())},
                               {"gaussians", model.experts[k].size()}});
  }
  write_router(dir / "router.msr", model.router);
  write_text(dir / "checkpoint.json", meta.dump(2) + "\n");
}

MoeModel read_moe(const fs::path& dir) {
  if (!fs::exists(dir / "checkpoint.json")) throw IoError("no checkpoint at " + dir.string());
  json meta;
  try {
    meta = json::parse(read_text(dir / "checkpoint.json"));
  } catch (const json::exception& e) {
    throw IoError("malformed checkpoint.json in " + dir.string() + ": " + e.what());
  }
  MoeModel model;
  for (const auto& e : meta.at("experts")) model.experts.push_back(read_expert(dir / e.at("file").get<std::string>()));
  model.router = read_router(dir / "router.msr");
  if (model.router.expert_count() != static_cast<int>(model.experts.size())) {
    throw IoError("router and expert counts differ in " + dir.string());
  }
  if (model.router.kind == RouterKind::kVolumeAware) {
    for (std::size_t k = 0; k < model.experts.size(); ++k) {
      if (model.router.weights.experts[k].size() != model.experts[k].size()) {
        throw IoError("router weights do not match expert " + std::to_string(k) + " in " + dir.string());
      }
    }
  }
  return model;
}

namespace {

json vec_json(const auto& v) {
  json a = json::array();
  for (int i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Vec3 json_vec3(const json& a) { return Vec3(a.at(0).get<double>(), a.at(1).get<double>(), a.at(2).get<double>()); }

json spec_json(const SceneSpec& s) {
  json j;
  j["resolution"] = {s.resolution.height, s.resolution.width};
  j["focal"] = s.focal;
  j["camera_count"] = s.camera_count;
  j["camera_distance"] = s.camera_distance;
  j["arc_degrees"] = s.arc_degrees;
  j["train_views"] = s.train_views;
  j["test_views"] = s.test_views;
  j["regions"] = json::array();
  for (const RegionSpec& r : s.regions) {
    j["regions"].push_back({{"regime", to_string(r.regime)}, {"gaussians", r.gaussian_count},
                            {"center", vec_json(r.center)}, {"radius", r.radius},
                            {"amplitude", r.amplitude}, {"scale", r.scale}});
  }
  return j;
}

SceneSpec spec_from_json(const json& j) {
  SceneSpec s;
  s.resolution = {j.at("resolution").at(0).get<int>(), j.at("resolution").at(1).get<int>()};
  s.focal = j.at("focal").get<double>();
  s.camera_count = j.at("camera_count").get<int>();
  s.camera_distance = j.at("camera_distance").get<double>();
  s.arc_degrees = j.at("arc_degrees").get<double>();
  s.train_views = j.at("train_views").get<int>();
  s.test_views = j.at("test_views").get<int>();
  for (const auto& r : j.at("regions")) {
    RegionSpec rs;
    rs.regime = motion_regime_from_string(r.at("regime").get<std::string>());
    rs.gaussian_count = r.at("gaussians").get<int>();
    rs.center = json_vec3(r.at("center"));
    rs.radius = r.at("radius").get<double>();
    rs.amplitude = r.at("amplitude").get<double>();
    rs.scale = r.at("scale").get<double>();
    s.regions.push_back(rs);
  }
  return s;
}

}  // namespace

void write_scene(const fs::path& dir, const SynthScene& scene) {
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "truth");
  json j;
  j["format"] = kDatasetFormatVersion;
  j["seed"] = scene.seed;
  j["spec"] = spec_json(scene.spec);
  j["truth"] = json::array();
  for (std::size_t r = 0; r < scene.truth.components.size(); ++r) {
    const std::string name = "truth/region_" + std::to_string(r) + ".msx";
    write_expert(dir / name, scene.truth.components[r]);
    j["truth"].push_back({{"file", name}, {"regime", to_string(scene.truth.regimes[r])}});
  }
  j["views"] = json::array();
  const Dataset& d = scene.dataset;
  for (std::size_t v = 0; v < d.views.size(); ++v) {
    const View& view = d.views[v];
    std::ostringstream name;
    name << "images/view_" << std::setw(3) << std::setfill('0') << v;
    json jv;
    jv["split"] = d.split[v] == Split::kTrain ? "train" : "test";
    jv["camera_id"] = d.camera_id.empty() ? 0 : d.camera_id[v];
    jv["time"] = view.time;
    const Camera& c = view.camera;
    jv["camera"] = {{"position", vec_json(c.position)},
                    {"orientation_wxyz", {c.orientation.w(), c.orientation.x(), c.orientation.y(), c.orientation.z()}},
                    {"focal", vec_json(c.focal)},
                    {"principal_point", vec_json(c.principal_point)},
                    {"resolution", {c.resolution.height, c.resolution.width}},
                    {"near_clip", c.near_clip}};
    if (view.ground_truth) {
      write_f32(dir / (name.str() + ".f32"), *view.ground_truth);
      write_png(dir / (name.str() + ".png"), *view.ground_truth);
      jv["image"] = name.str() + ".f32";
    }
    j["views"].push_back(jv);
  }
  write_text(dir / "dataset.json", j.dump(2) + "\n");
}

SynthScene read_scene(const fs::path& dir) {
  if (!fs::exists(dir / "dataset.json")) throw IoError("no dataset at " + dir.string());
  SynthScene scene;
  try {
    const json j = json::parse(read_text(dir / "dataset.json"));
    if (j.at("format").get<int>() != kDatasetFormatVersion) throw IoError("unsupported dataset format");
    scene.seed = j.at("seed").get<std::uint64_t>();
    scene.spec = spec_from_json(j.at("spec"));
    for (const auto& t : j.at("truth")) {
      scene.truth.components.push_back(read_expert(dir / t.at("file").get<std::string>()));
      scene.truth.regimes.push_back(motion_regime_from_string(t.at("regime").get<std::string>()));
    }
    for (const auto& jv : j.at("views")) {
      const json& jc = jv.at("camera");
      const auto& q = jc.at("orientation_wxyz");
      View view;
      view.camera = make_camera(json_vec3(jc.at("position")),
                                Quat(q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(),
                                     q.at(3).get<double>()),
                                Vec2(jc.at("focal").at(0).get<double>(), jc.at("focal").at(1).get<double>()),
                                Vec2(jc.at("principal_point").at(0).get<double>(),
                                     jc.at("principal_point").at(1).get<double>()),
                                Resolution{jc.at("resolution").at(0).get<int>(), jc.at("resolution").at(1).get<int>()},
                                jc.at("near_clip").get<double>());
      view.time = jv.at("time").get<double>();
      if (jv.contains("image")) view.ground_truth = read_f32(dir / jv.at("image").get<std::string>());
      scene.dataset.views.push_back(std::move(view));
      const std::string split = jv.at("split").get<std::string>();
      if (split != "train" && split != "test") throw IoError("unknown split '" + split + "'");
      scene.dataset.split.push_back(split == "train" ? Split::kTrain : Split::kTest);
      scene.dataset.camera_id.push_back(jv.at("camera_id").get<int>());
    }
  } catch (const json::exception& e) {
    throw IoError("malformed dataset.json in " + dir.string() + ": " + e.what());
  }
  validate(scene.dataset);
  return scene;
}

std::string sha256_file(const fs::path& path) {
  auto in = open_in(path);
  EVP_MD_CTX* ctx = EVP_MD_CTX_new();
  if (!ctx || EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr) != 1) {
    EVP_MD_CTX_free(ctx);
    throw IoError("sha256: digest initialization failed");
  }
  std::vector<char> buf(1 << 16);
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (in.gcount() > 0) EVP_DigestUpdate(ctx, buf.data(), static_cast<std::size_t>(in.gcount()));
  }
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_DigestFinal_ex(ctx, digest, &len);
  EVP_MD_CTX_free(ctx);
  std::ostringstream hex;
  for (unsigned int i = 0; i < len; ++i) hex << std::hex << std::setw(2) << std::setfill('0') << static_cast<int>(digest[i]);
  return hex.str();
}

Manifest Manifest::build(const fs::path& dir, std::string command, std::uint64_t seed) {
  Manifest m;
  m.command = std::move(command);
  m.seed = seed;
  std::vector<fs::path> files;
  for (const auto& entry : fs::recursive_directory_iterator(dir)) {
    if (!entry.is_regular_file()) continue;
    const fs::path rel = fs::relative(entry.path(), dir);
    if (rel == "manifest.json" || rel == ".lock") continue;
    files.push_back(rel);
  }
  std::sort(files.begin(), files.end());
  for (const fs::path& rel : files) {
    m.files.push_back({rel.generic_string(), fs::file_size(dir / rel), sha256_file(dir / rel)});
  }
  return m;
}

std::string Manifest::to_json() const {
  json j;
  j["command"] = command;
  j["seed"] = seed;
  j["files"] = json::array();
  for (const ManifestEntry& e : files) j["files"].push_back({{"path", e.path}, {"bytes", e.bytes}, {"sha256", e.sha256}});
  return j.dump(2) + "\n";
}

Manifest Manifest::from_json(const std::string& text) {
  Manifest m;
  try {
    const json j = json::parse(text);
    m.command = j.at("command").get<std::string>();
    m.seed = j.at("seed").get<std::uint64_t>();
    for (const auto& e : j.at("files")) {
      m.files.push_back({e.at("path").get<std::string>(), e.at("bytes").get<std::uintmax_t>(),
                         e.at("sha256").get<std::string>()});
    }
  } catch (const json::exception& e) {
    throw IoError(std::string("malformed manifest: ") + e.what());
  }
  return m;
}

bool Manifest::verify(const fs::path& dir) const {
  for (const ManifestEntry& e : files) {
    const fs::path p = dir / e.path;
    if (!fs::is_regular_file(p) || fs::file_size(p) != e.bytes || sha256_file(p) != e.sha256) return false;
  }
  return true;
}

}  // namespace moesplat
