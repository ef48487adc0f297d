#include "gspw/io.hpp"

#include <fmt/format.h>

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "gspw/error.hpp"

namespace gspw {

namespace {

constexpr std::array<char, 8> kMagic = {'G', 'S', 'P', 'W', 'S', 'C', 'N', '\0'};
constexpr std::uint32_t kFormatVersion = 1;
constexpr int kFixedFloats = 14;  // position 3, scale 3, rotation 4, opacity 1, colour 3

static_assert(std::endian::native == std::endian::little,
              "the byte writers below assume a little-endian host");

void put_u32(std::vector<char>& out, std::uint32_t v) {
  char b[4];
  std::memcpy(b, &v, 4);
  out.insert(out.end(), b, b + 4);
}

void put_u64(std::vector<char>& out, std::uint64_t v) {
  char b[8];
  std::memcpy(b, &v, 8);
  out.insert(out.end(), b, b + 8);
}

void put_f32(std::vector<char>& out, double v) {
  const float f = static_cast<float>(v);
  char b[4];
  std::memcpy(b, &f, 4);
  out.insert(out.end(), b, b + 4);
}

class Reader {
 public:
  explicit Reader(const std::vector<char>& bytes) : bytes_(bytes) {}

  std::size_t offset() const { return pos_; }
  std::size_t remaining() const { return bytes_.size() - pos_; }

  void need(std::size_t n, const char* what) const {
    if (remaining() < n)
      throw Error(ErrorCode::Format,
                  fmt::format("truncated {} at byte offset {} (need {} bytes, have {})", what,
                              pos_, n, remaining()));
  }
  std::uint32_t u32(const char* what) {
    need(4, what);
    std::uint32_t v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return v;
  }
  std::uint64_t u64(const char* what) {
    need(8, what);
    std::uint64_t v;
    std::memcpy(&v, bytes_.data() + pos_, 8);
    pos_ += 8;
    return v;
  }
  double f32() {
    float v;
    std::memcpy(&v, bytes_.data() + pos_, 4);
    pos_ += 4;
    return static_cast<double>(v);
  }
  std::string str(std::size_t n, const char* what) {
    need(n, what);
    std::string s(bytes_.data() + pos_, n);
    pos_ += n;
    return s;
  }

 private:
  const std::vector<char>& bytes_;
  std::size_t pos_ = 0;
};

nlohmann::json vec_json(const Vec3& v) { return nlohmann::json::array({v.x(), v.y(), v.z()}); }

Vec3 json_vec(const nlohmann::json& j) {
  return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

nlohmann::json camera_json(const Camera& c) {
  return {{"frame_index", c.frame_index},
          {"width", c.width},
          {"height", c.height},
          {"fx", c.fx},
          {"fy", c.fy},
          {"cx", c.cx},
          {"cy", c.cy},
          {"rotation_wxyz", {c.rotation.w, c.rotation.x, c.rotation.y, c.rotation.z}},
          {"translation", vec_json(c.translation)}};
}

Camera json_camera(const nlohmann::json& j) {
  Camera c;
  c.frame_index = j.at("frame_index").get<int>();
  c.width = j.at("width").get<int>();
  c.height = j.at("height").get<int>();
  c.fx = j.at("fx").get<double>();
  c.fy = j.at("fy").get<double>();
  c.cx = j.at("cx").get<double>();
  c.cy = j.at("cy").get<double>();
  const auto& q = j.at("rotation_wxyz");
  c.rotation = {q.at(0).get<double>(), q.at(1).get<double>(), q.at(2).get<double>(),
                q.at(3).get<double>()};
  c.translation = json_vec(j.at("translation"));
  return c;
}

nlohmann::json vecs_json(const std::vector<Vec3>& vs) {
  auto arr = nlohmann::json::array();
  for (const auto& v : vs) arr.push_back(vec_json(v));
  return arr;
}

std::vector<Vec3> json_vecs(const nlohmann::json& j) {
  std::vector<Vec3> out;
  out.reserve(j.size());
  for (const auto& e : j) out.push_back(json_vec(e));
  return out;
}

nlohmann::json manifold_json(const GroundManifold& m) {
  return {{"points", vecs_json(m.points)},
          {"arc", m.arc},
          {"tangents", vecs_json(m.tangents)},
          {"laterals", vecs_json(m.laterals)},
          {"heights", m.heights}};
}

GroundManifold json_manifold(const nlohmann::json& j) {
  GroundManifold m;
  m.points = json_vecs(j.at("points"));
  m.arc = j.at("arc").get<std::vector<double>>();
  m.tangents = json_vecs(j.at("tangents"));
  m.laterals = json_vecs(j.at("laterals"));
  m.heights = j.at("heights").get<std::vector<double>>();
  return m;
}

std::vector<char> read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, fmt::format("cannot open {}", path.string()));
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const fs::path& path, const std::vector<char>& bytes) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, fmt::format("cannot write {}", path.string()));
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw Error(ErrorCode::Io, fmt::format("write failed for {}", path.string()));
}

}  // namespace

std::vector<char> encode_scene(const Scene& scene) {
  const auto violations = validate_scene(scene);
  if (!violations.empty())
    throw Error(ErrorCode::Validation, "refusing to save invalid scene: " + violations[0].message);

  nlohmann::json meta;
  meta["feature_dim"] = scene.feature_dim;
  meta["primitive_count"] = scene.primitives.size();
  auto ids = nlohmann::json::array();
  for (const auto& p : scene.primitives) ids.push_back(p.id);
  meta["ids"] = std::move(ids);
  auto cams = nlohmann::json::array();
  for (const auto& c : scene.cameras) cams.push_back(camera_json(c));
  meta["cameras"] = std::move(cams);
  meta["trajectory"] = vecs_json(scene.trajectory);
  meta["manifold"] = scene.manifold ? manifold_json(*scene.manifold) : nlohmann::json();
  meta["metadata"] = scene.metadata;
  const std::string text = meta.dump();

  std::vector<char> out;
  const std::size_t record = kFixedFloats + static_cast<std::size_t>(scene.feature_dim);
  out.reserve(16 + 8 + text.size() + scene.primitives.size() * record * 4);
  out.insert(out.end(), kMagic.begin(), kMagic.end());
  put_u32(out, kFormatVersion);
  put_u32(out, 0);
  put_u64(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  for (const auto& p : scene.primitives) {
    for (int a = 0; a < 3; ++a) put_f32(out, p.position[a]);
    for (int a = 0; a < 3; ++a) put_f32(out, p.scale[a]);
    put_f32(out, p.rotation.w);
    put_f32(out, p.rotation.x);
    put_f32(out, p.rotation.y);
    put_f32(out, p.rotation.z);
    put_f32(out, p.opacity);
    for (int a = 0; a < 3; ++a) put_f32(out, p.color[a]);
    for (double f : p.feature) put_f32(out, f);
  }
  return out;
}

Scene decode_scene(const std::vector<char>& bytes) {
  Reader r(bytes);
  const std::string magic = r.str(8, "magic");
  if (std::memcmp(magic.data(), kMagic.data(), kMagic.size()) != 0)
    throw Error(ErrorCode::Format, "bad magic at byte offset 0");
  const std::uint32_t version = r.u32("version");
  if (version != kFormatVersion)
    throw Error(ErrorCode::UnsupportedVersion,
                fmt::format("unsupported scene format version {} at byte offset 8", version));
  r.u32("reserved");
  const std::size_t len_offset = r.offset();
  const std::uint64_t len = r.u64("metadata length");
  if (len > r.remaining())
    throw Error(ErrorCode::Format,
                fmt::format("metadata length {} at byte offset {} exceeds file size", len,
                            len_offset));
  const std::size_t meta_offset = r.offset();
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.str(len, "metadata"));
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Format,
                fmt::format("malformed metadata JSON at byte offset {}: {}", meta_offset, e.what()));
  }

  Scene scene;
  try {
    scene.feature_dim = meta.at("feature_dim").get<int>();
    const auto count = meta.at("primitive_count").get<std::size_t>();
    const auto& ids = meta.at("ids");
    if (ids.size() != count)
      throw Error(ErrorCode::Format,
                  fmt::format("id list length {} != primitive_count {}", ids.size(), count));
    for (const auto& c : meta.at("cameras")) scene.cameras.push_back(json_camera(c));
    scene.trajectory = json_vecs(meta.at("trajectory"));
    if (meta.contains("manifold") && !meta["manifold"].is_null())
      scene.manifold = json_manifold(meta["manifold"]);
    if (meta.contains("metadata")) scene.metadata = meta["metadata"];

    const std::size_t record = kFixedFloats + static_cast<std::size_t>(scene.feature_dim);
    const std::size_t table_offset = r.offset();
    if (r.remaining() != count * record * 4)
      throw Error(ErrorCode::Format,
                  fmt::format("primitive table at byte offset {} has {} bytes, expected {}",
                              table_offset, r.remaining(), count * record * 4));
    scene.primitives.resize(count);
    for (std::size_t i = 0; i < count; ++i) {
      auto& p = scene.primitives[i];
      p.id = ids[i].get<std::int64_t>();
      for (int a = 0; a < 3; ++a) p.position[a] = r.f32();
      for (int a = 0; a < 3; ++a) p.scale[a] = r.f32();
      p.rotation.w = r.f32();
      p.rotation.x = r.f32();
      p.rotation.y = r.f32();
      p.rotation.z = r.f32();
      p.opacity = r.f32();
      for (int a = 0; a < 3; ++a) p.color[a] = r.f32();
      p.feature.resize(static_cast<std::size_t>(scene.feature_dim));
      for (auto& f : p.feature) f = r.f32();
    }
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::Format,
                fmt::format("metadata at byte offset {} missing fields: {}", meta_offset, e.what()));
  }

  const auto violations = validate_scene(scene);
  if (!violations.empty())
    throw Error(ErrorCode::Validation,
                fmt::format("scene failed validation ({} violations): {}", violations.size(),
                            violations[0].message));
  return scene;
}

Scene load_scene(const fs::path& path) { return decode_scene(read_file(path)); }

void save_scene(const Scene& scene, const fs::path& path) { write_file(path, encode_scene(scene)); }

void quantize_to_f32(Scene& scene) {
  auto q = [](double v) { return static_cast<double>(static_cast<float>(v)); };
  for (auto& p : scene.primitives) {
    p.position = p.position.cast<float>().cast<double>();
    p.scale = p.scale.cast<float>().cast<double>();
    p.color = p.color.cast<float>().cast<double>();
    p.rotation = {q(p.rotation.w), q(p.rotation.x), q(p.rotation.y), q(p.rotation.z)};
    p.opacity = q(p.opacity);
    for (auto& f : p.feature) f = q(f);
  }
}

// ---- Netpbm --------------------------------------------------------------

namespace {

struct PnmHeader {
  std::string magic;
  int width = 0, height = 0, maxval = 0;
  std::size_t data_offset = 0;
};

PnmHeader parse_pnm(const std::vector<char>& bytes, const fs::path& path) {
  PnmHeader h;
  std::size_t pos = 0;
  auto skip_ws = [&] {
    while (pos < bytes.size()) {
      if (bytes[pos] == '#') {
        while (pos < bytes.size() && bytes[pos] != '\n') ++pos;
      } else if (std::isspace(static_cast<unsigned char>(bytes[pos]))) {
        ++pos;
      } else {
        break;
      }
    }
  };
  auto token = [&] {
    skip_ws();
    std::string t;
    while (pos < bytes.size() && !std::isspace(static_cast<unsigned char>(bytes[pos])))
      t.push_back(bytes[pos++]);
    return t;
  };
  auto number = [&](const char* what) {
    const std::size_t at = pos;
    const std::string t = token();
    try {
      return std::stoi(t);
    } catch (...) {
      throw Error(ErrorCode::Format,
                  fmt::format("{}: bad {} at byte offset {}", path.string(), what, at));
    }
  };
  h.magic = token();
  h.width = number("width");
  h.height = number("height");
  h.maxval = number("maxval");
  if (pos >= bytes.size())
    throw Error(ErrorCode::Format, fmt::format("{}: truncated header", path.string()));
  ++pos;  // single whitespace before raster
  h.data_offset = pos;
  return h;
}

std::vector<char> pnm_header(const char* magic, int w, int h, int maxval) {
  const std::string s = fmt::format("{}\n{} {}\n{}\n", magic, w, h, maxval);
  return {s.begin(), s.end()};
}

std::uint8_t to_u8(double v) {
  if (!(v > 0.0)) return 0;
  if (v >= 1.0) return 255;
  return static_cast<std::uint8_t>(std::lround(v * 255.0));
}

}  // namespace

Mask load_mask_pgm(const fs::path& path) {
  const auto bytes = read_file(path);
  const auto h = parse_pnm(bytes, path);
  if (h.magic != "P5" || h.maxval > 255)
    throw Error(ErrorCode::Format, fmt::format("{}: expected 8-bit P5", path.string()));
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height;
  if (bytes.size() - h.data_offset < n)
    throw Error(ErrorCode::Format,
                fmt::format("{}: truncated raster at byte offset {}", path.string(), h.data_offset));
  Mask m(h.width, h.height);
  for (std::size_t i = 0; i < n; ++i) m.bits[i] = bytes[h.data_offset + i] != 0 ? 1 : 0;
  return m;
}

void save_mask_pgm(const Mask& mask, const fs::path& path) {
  auto out = pnm_header("P5", mask.width, mask.height, 255);
  for (auto b : mask.bits) out.push_back(static_cast<char>(b ? 255 : 0));
  write_file(path, out);
}

Image load_ppm(const fs::path& path) {
  const auto bytes = read_file(path);
  const auto h = parse_pnm(bytes, path);
  if (h.magic != "P6" || h.maxval > 255)
    throw Error(ErrorCode::Format, fmt::format("{}: expected 8-bit P6", path.string()));
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height * 3;
  if (bytes.size() - h.data_offset < n)
    throw Error(ErrorCode::Format,
                fmt::format("{}: truncated raster at byte offset {}", path.string(), h.data_offset));
  Image img(h.width, h.height, 3);
  for (std::size_t i = 0; i < n; ++i)
    img.data[i] = static_cast<std::uint8_t>(bytes[h.data_offset + i]) / double(h.maxval);
  return img;
}

void save_ppm(const Image& rgb, const fs::path& path) {
  if (rgb.channels != 3) throw Error(ErrorCode::DimensionMismatch, "PPM needs 3 channels");
  auto out = pnm_header("P6", rgb.width, rgb.height, 255);
  for (double v : rgb.data) out.push_back(static_cast<char>(to_u8(v)));
  write_file(path, out);
}

void save_pgm16(const Image& gray, double scale, const fs::path& path) {
  if (gray.channels != 1) throw Error(ErrorCode::DimensionMismatch, "PGM-16 needs 1 channel");
  auto out = pnm_header("P5", gray.width, gray.height, 65535);
  for (double v : gray.data) {
    const double s = std::clamp(v * scale, 0.0, 65535.0);
    const auto u = static_cast<std::uint16_t>(std::lround(s));
    out.push_back(static_cast<char>(u >> 8));  // PGM-16 is big-endian
    out.push_back(static_cast<char>(u & 0xff));
  }
  write_file(path, out);
}

Image load_pgm16(const fs::path& path, double scale) {
  const auto bytes = read_file(path);
  const auto h = parse_pnm(bytes, path);
  if (h.magic != "P5" || h.maxval < 256)
    throw Error(ErrorCode::Format, fmt::format("{}: expected 16-bit P5", path.string()));
  const std::size_t n = static_cast<std::size_t>(h.width) * h.height;
  if (bytes.size() - h.data_offset < 2 * n)
    throw Error(ErrorCode::Format, fmt::format("{}: truncated raster", path.string()));
  Image img(h.width, h.height, 1);
  for (std::size_t i = 0; i < n; ++i) {
    const auto hi = static_cast<std::uint8_t>(bytes[h.data_offset + 2 * i]);
    const auto lo = static_cast<std::uint8_t>(bytes[h.data_offset + 2 * i + 1]);
    img.data[i] = ((hi << 8) | lo) / scale;
  }
  return img;
}

Image load_fmap(const fs::path& path) {
  const auto bytes = read_file(path);
  Reader r(bytes);
  const auto h = r.u32("fmap height");
  const auto w = r.u32("fmap width");
  const auto d = r.u32("fmap dim");
  const std::size_t n = static_cast<std::size_t>(h) * w * d;
  if (r.remaining() != n * 4)
    throw Error(ErrorCode::Format,
                fmt::format("{}: payload at byte offset 12 has {} bytes, expected {}",
                            path.string(), r.remaining(), n * 4));
  Image img(static_cast<int>(w), static_cast<int>(h), static_cast<int>(d));
  for (std::size_t i = 0; i < n; ++i) img.data[i] = r.f32();
  for (double v : img.data)
    if (!std::isfinite(v))
      throw Error(ErrorCode::Validation, fmt::format("{}: non-finite feature value", path.string()));
  return img;
}

void save_fmap(const Image& map, const fs::path& path) {
  std::vector<char> out;
  out.reserve(12 + map.data.size() * 4);
  put_u32(out, static_cast<std::uint32_t>(map.height));
  put_u32(out, static_cast<std::uint32_t>(map.width));
  put_u32(out, static_cast<std::uint32_t>(map.channels));
  for (double v : map.data) put_f32(out, v);
  write_file(path, out);
}

std::string frame_file(const std::string& stem, int frame_index, const std::string& ext) {
  return fmt::format("{}_{:04d}.{}", stem, frame_index, ext);
}

std::vector<int> list_frames(const fs::path& dir, const std::string& prefix,
                             const std::string& ext) {
  if (!fs::is_directory(dir))
    throw Error(ErrorCode::Io, fmt::format("directory {} not found", dir.string()));
  const std::string head = prefix + "_";
  const std::string tail = "." + ext;
  std::vector<int> frames;
  for (const auto& entry : fs::directory_iterator(dir)) {
    const auto name = entry.path().filename().string();
    if (name.size() <= head.size() + tail.size() || name.rfind(head, 0) != 0 ||
        name.compare(name.size() - tail.size(), tail.size(), tail) != 0)
      continue;
    const auto digits = name.substr(head.size(), name.size() - head.size() - tail.size());
    if (digits.empty() || !std::all_of(digits.begin(), digits.end(), ::isdigit)) continue;
    frames.push_back(std::stoi(digits));
  }
  std::sort(frames.begin(), frames.end());
  return frames;
}

std::vector<FrameMask> load_mask_dir(const fs::path& dir, const std::string& prefix) {
  std::vector<FrameMask> out;
  for (int f : list_frames(dir, prefix, "pgm"))
    out.push_back({f, load_mask_pgm(dir / frame_file(prefix, f, "pgm"))});
  return out;
}

}  // namespace gspw
