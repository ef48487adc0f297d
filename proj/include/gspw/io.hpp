#pragma once

#include <filesystem>
#include <string>
#include <vector>

#include "gspw/image.hpp"
#include "gspw/scene.hpp"

namespace gspw {

namespace fs = std::filesystem;

// Scene file (.gsp), little-endian throughout:
//   bytes 0..7   magic "GSPWSCN\0"
//   bytes 8..11  u32 format version
//   bytes 12..15 u32 reserved (0)
//   u64          metadata length L
//   L bytes      JSON metadata: feature_dim, primitive_count, ids, cameras,
//                trajectory, manifold, metadata
//   table        per primitive, f32 in order: position[3], scale[3],
//                rotation[4] as (w,x,y,z), opacity, colour[3], feature[D]
//
// Attributes are held as double in memory and quantised to f32 on save, so a
// scene whose values are already f32-representable round-trips exactly.

Scene load_scene(const fs::path& path);
void save_scene(const Scene& scene, const fs::path& path);
/// Serialised bytes of save_scene without touching the filesystem.
std::vector<char> encode_scene(const Scene& scene);
Scene decode_scene(const std::vector<char>& bytes);
/// Rounds every primitive attribute to the nearest f32 value.
void quantize_to_f32(Scene& scene);

/// Binary PGM (P5, maxval 255): nonzero = set.
Mask load_mask_pgm(const fs::path& path);
void save_mask_pgm(const Mask& mask, const fs::path& path);

/// Binary PPM (P6, 8 bit). Values are clamped to [0,1] and rounded.
Image load_ppm(const fs::path& path);
void save_ppm(const Image& rgb, const fs::path& path);

/// Binary 16-bit PGM of a single-channel image: value * scale, clamped, rounded.
void save_pgm16(const Image& gray, double scale, const fs::path& path);
Image load_pgm16(const fs::path& path, double scale);

/// Feature map (.fmap): u32 H, u32 W, u32 D, then f32 row-major data.
Image load_fmap(const fs::path& path);
void save_fmap(const Image& map, const fs::path& path);

/// "mask_0007.pgm"-style frame file name.
std::string frame_file(const std::string& stem, int frame_index, const std::string& ext);

/// All frame masks in a directory named <prefix>_NNNN.pgm, ordered by frame.
std::vector<FrameMask> load_mask_dir(const fs::path& dir, const std::string& prefix = "mask");

/// Frame indices of files named <prefix>_NNNN.<ext> in a directory, ascending.
std::vector<int> list_frames(const fs::path& dir, const std::string& prefix, const std::string& ext);

}  // namespace gspw
