#pragma once

// File formats: PNG color, PFM float maps, binary transients, sparse-depth
// CSV, PLY surfel export, JSON scenes and dataset directories.

#include "surfelfuse/core.hpp"
#include "surfelfuse/loss.hpp"
#include "surfelfuse/metrics.hpp"
#include "surfelfuse/optim.hpp"
#include "surfelfuse/sim.hpp"

#include <filesystem>
#include <stdexcept>
#include <string>

namespace surfelfuse {

class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

namespace fs = std::filesystem;

/// 8-bit RGB (3 channels) or gray (1 channel); values clamped to [0, 1].
void write_png(const fs::path& path, const Image& image);
Image read_png(const fs::path& path);

/// 32-bit float, little-endian, 1 or 3 channels. Values round-trip exactly when they are floats.
void write_pfm(const fs::path& path, const Image& image);
Image read_pfm(const fs::path& path);

inline constexpr char kTransientMagic[4] = {'S', 'F', 'T', 'R'};

/// 16-byte header (magic, nx, ny, nt as uint32 LE) then float32 LE counts [ny][nx][nt].
void write_transient(const fs::path& path, const TransientImage& t);
TransientImage read_transient(const fs::path& path, double bin_width_s);
void write_transient_csv(const fs::path& path, const TransientImage& t);

/// Columns zone_x, zone_y, u, v, depth.
void write_sparse_csv(const fs::path& path, const std::vector<Vec2>& points, const std::vector<double>& depth,
                      int nx);
std::vector<double> read_sparse_csv(const fs::path& path);

/// ASCII PLY: position, normal (third rotation column), opacity, scale, color.
void write_ply(const fs::path& path, const Scene& scene);

/// Writes to a sibling temp file and renames over `path`.
void write_text_atomic(const fs::path& path, const std::string& text);

std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const fs::path& path);

/// Writes views/{k}/... plus manifest.json with a SHA-256 per file.
void save_dataset(const DatasetBundle& bundle, const fs::path& dir);

/// Loads and verifies every hash listed in manifest.json. Throws DataError on
/// mismatch or missing files. transient.bin and sparse_depth.csv may be
/// absent; the view then carries an empty transient / sparse vector.
DatasetBundle load_dataset(const fs::path& dir);

/// Throws DataError when a training view lacks a channel the mode reads.
void check_channels(const DatasetBundle& bundle, LossMode mode);

/// One row per iteration: loss components, surfel count, optional test depth MAE.
void write_trace_csv(const fs::path& path, const std::vector<TraceRow>& trace);

/// One row per test view plus a final "mean" row. Absent metrics are empty cells.
void write_report_csv(const fs::path& path, const MetricsReport& report);

/// Columns zone_x, zone_y, weight, snr, texture.
void write_weight_map_csv(const fs::path& path, const PatchWeightMap& map);
/// Gray heatmap, one `cell` x `cell` block per patch, white = RGB weight 1.
void write_weight_map_png(const fs::path& path, const PatchWeightMap& map, int cell = 16);

}  // namespace surfelfuse
