#include "surfelfuse/io.hpp"

#include "surfelfuse/config.hpp"

#include <openssl/evp.h>
#include <png.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <map>
#include <sstream>

namespace surfelfuse {

namespace {

std::string read_bytes(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_bytes(const fs::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("short write to " + path.string());
}

void put_u32(std::string& s, std::uint32_t v) {
    for (int k = 0; k < 4; ++k) s.push_back(static_cast<char>((v >> (8 * k)) & 0xff));
}

std::uint32_t get_u32(const std::string& s, std::size_t at) {
    std::uint32_t v = 0;
    for (int k = 0; k < 4; ++k) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(s[at + k])) << (8 * k);
    return v;
}

void put_f32(std::string& s, double v) { put_u32(s, std::bit_cast<std::uint32_t>(static_cast<float>(v))); }

float get_f32(const std::string& s, std::size_t at) { return std::bit_cast<float>(get_u32(s, at)); }

std::string fmt(double v) {
    std::ostringstream ss;
    ss << std::setprecision(17) << v;
    return ss.str();
}

}  // namespace

void write_png(const fs::path& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3) throw InvalidParameter("write_png: need 1 or 3 channels");
    std::vector<png_byte> bytes(image.data.size());
    for (std::size_t i = 0; i < bytes.size(); ++i)
        bytes[i] = static_cast<png_byte>(std::lround(std::clamp(image.data[i], 0.0, 1.0) * 255.0));
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    img.width = static_cast<png_uint_32>(image.width);
    img.height = static_cast<png_uint_32>(image.height);
    img.format = image.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    if (!png_image_write_to_file(&img, path.c_str(), 0, bytes.data(), 0, nullptr))
        throw DataError("png write failed for " + path.string() + ": " + img.message);
}

Image read_png(const fs::path& path) {
    png_image img;
    std::memset(&img, 0, sizeof(img));
    img.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&img, path.c_str())) throw DataError("png read failed: " + path.string());
    img.format = PNG_FORMAT_RGB;
    std::vector<png_byte> bytes(PNG_IMAGE_SIZE(img));
    if (!png_image_finish_read(&img, nullptr, bytes.data(), 0, nullptr)) {
        png_image_free(&img);
        throw DataError("png decode failed: " + path.string());
    }
    Image out(static_cast<int>(img.width), static_cast<int>(img.height), 3);
    for (std::size_t i = 0; i < out.data.size(); ++i) out.data[i] = bytes[i] / 255.0;
    return out;
}

void write_pfm(const fs::path& path, const Image& image) {
    if (image.channels != 1 && image.channels != 3) throw InvalidParameter("write_pfm: need 1 or 3 channels");
    std::string s = image.channels == 3 ? "PF\n" : "Pf\n";
    s += std::to_string(image.width) + " " + std::to_string(image.height) + "\n-1.0\n";
    // PFM stores rows bottom to top.
    for (int y = image.height - 1; y >= 0; --y)
        for (int x = 0; x < image.width; ++x)
            for (int c = 0; c < image.channels; ++c) put_f32(s, image.at(x, y, c));
    write_bytes(path, s);
}

Image read_pfm(const fs::path& path) {
    const std::string s = read_bytes(path);
    std::istringstream in(s);
    std::string magic;
    int w = 0, h = 0;
    double scale = 0.0;
    in >> magic >> w >> h >> scale;
    if ((magic != "PF" && magic != "Pf") || w <= 0 || h <= 0 || scale == 0.0)
        throw DataError("bad PFM header in " + path.string());
    if (scale > 0.0) throw DataError("big-endian PFM not supported: " + path.string());
    in.get();  // single whitespace after the scale
    const std::size_t start = static_cast<std::size_t>(in.tellg());
    const int channels = magic == "PF" ? 3 : 1;
    Image out(w, h, channels);
    if (s.size() < start + out.data.size() * 4) throw DataError("truncated PFM " + path.string());
    std::size_t at = start;
    for (int y = h - 1; y >= 0; --y)
        for (int x = 0; x < w; ++x)
            for (int c = 0; c < channels; ++c, at += 4) out.at(x, y, c) = get_f32(s, at);
    return out;
}

void write_transient(const fs::path& path, const TransientImage& t) {
    std::string s(kTransientMagic, 4);
    put_u32(s, static_cast<std::uint32_t>(t.nx));
    put_u32(s, static_cast<std::uint32_t>(t.ny));
    put_u32(s, static_cast<std::uint32_t>(t.nt));
    for (double v : t.counts) put_f32(s, v);
    write_bytes(path, s);
}

TransientImage read_transient(const fs::path& path, double bin_width_s) {
    const std::string s = read_bytes(path);
    if (s.size() < 16 || std::memcmp(s.data(), kTransientMagic, 4) != 0)
        throw DataError("bad transient header in " + path.string());
    const int nx = static_cast<int>(get_u32(s, 4)), ny = static_cast<int>(get_u32(s, 8)),
              nt = static_cast<int>(get_u32(s, 12));
    TransientImage t(nx, ny, nt, bin_width_s);
    if (s.size() != 16 + t.counts.size() * 4) throw DataError("transient size mismatch in " + path.string());
    for (std::size_t i = 0; i < t.counts.size(); ++i) {
        t.counts[i] = get_f32(s, 16 + 4 * i);
        if (!(t.counts[i] >= 0.0)) throw DataError("negative or non-finite count in " + path.string());
    }
    return t;
}

void write_transient_csv(const fs::path& path, const TransientImage& t) {
    std::ostringstream out;
    out << "zone_x,zone_y,bin,count\n";
    for (int iy = 0; iy < t.ny; ++iy)
        for (int ix = 0; ix < t.nx; ++ix) {
            const auto h = t.histogram(ix, iy);
            for (int b = 0; b < t.nt; ++b)
                if (h[b] != 0.0) out << ix << ',' << iy << ',' << b << ',' << fmt(h[b]) << '\n';
        }
    write_bytes(path, out.str());
}

void write_sparse_csv(const fs::path& path, const std::vector<Vec2>& points, const std::vector<double>& depth,
                      int nx) {
    if (points.size() != depth.size()) throw InvalidParameter("write_sparse_csv: size mismatch");
    std::ostringstream out;
    out << "zone_x,zone_y,u,v,depth\n";
    for (std::size_t i = 0; i < depth.size(); ++i)
        out << static_cast<int>(i) % nx << ',' << static_cast<int>(i) / nx << ',' << fmt(points[i].x()) << ','
            << fmt(points[i].y()) << ',' << fmt(depth[i]) << '\n';
    write_bytes(path, out.str());
}

std::vector<double> read_sparse_csv(const fs::path& path) {
    std::istringstream in(read_bytes(path));
    std::string line;
    if (!std::getline(in, line) || line != "zone_x,zone_y,u,v,depth")
        throw DataError("bad sparse depth header in " + path.string());
    std::vector<double> depth;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto pos = line.rfind(',');
        if (pos == std::string::npos) throw DataError("bad sparse depth row in " + path.string());
        try {
            depth.push_back(std::stod(line.substr(pos + 1)));
        } catch (const std::exception&) {
            throw DataError("bad sparse depth value in " + path.string());
        }
    }
    return depth;
}

void write_ply(const fs::path& path, const Scene& scene) {
    std::ostringstream out;
    out << "ply\nformat ascii 1.0\nelement vertex " << scene.size() << "\n"
        << "property float x\nproperty float y\nproperty float z\n"
        << "property float nx\nproperty float ny\nproperty float nz\n"
        << "property float opacity\nproperty float scale_0\nproperty float scale_1\n"
        << "property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n";
    for (const auto& s : scene.surfels) {
        const Vec3 n = quaternion_to_rotation(s.rotation).col(2);
        const Vec3 c = sh_to_color(s.color_coeffs, scene.sh_degree, Vec3::UnitZ());
        out << fmt(s.position.x()) << ' ' << fmt(s.position.y()) << ' ' << fmt(s.position.z()) << ' ' << fmt(n.x())
            << ' ' << fmt(n.y()) << ' ' << fmt(n.z()) << ' ' << fmt(s.opacity) << ' ' << fmt(s.scale.x()) << ' '
            << fmt(s.scale.y());
        for (int k = 0; k < 3; ++k) out << ' ' << std::lround(std::clamp(c[k], 0.0, 1.0) * 255.0);
        out << '\n';
    }
    write_text_atomic(path, out.str());
}

void write_text_atomic(const fs::path& path, const std::string& text) {
    fs::path tmp = path;
    tmp += ".tmp";
    write_bytes(tmp, text);
    fs::rename(tmp, path);
}

std::string sha256_hex(const std::string& bytes) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int len = 0;
    if (!EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr))
        throw DataError("sha256 failed");
    std::ostringstream out;
    for (unsigned int i = 0; i < len; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(digest[i]);
    return out.str();
}

std::string sha256_file(const fs::path& path) { return sha256_hex(read_bytes(path)); }

void save_dataset(const DatasetBundle& bundle, const fs::path& dir) {
    fs::create_directories(dir);
    const auto& lidar = bundle.config.lidar;
    std::map<std::string, std::string> hashes;
    Json views = Json::array();
    for (std::size_t k = 0; k < bundle.views.size(); ++k) {
        const DatasetView& v = bundle.views[k];
        const std::string rel = "views/" + std::to_string(k);
        const fs::path vdir = dir / rel;
        fs::create_directories(vdir);
        write_png(vdir / "rgb.png", v.rgb);
        write_transient(vdir / "transient.bin", v.gt.transient);
        write_sparse_csv(vdir / "sparse_depth.csv", zone_center_points(lidar, v.gt.camera), v.gt.sparse_depth,
                         lidar.nx);
        write_pfm(vdir / "gt_depth.pfm", v.gt.depth);
        write_pfm(vdir / "gt_normal.pfm", v.gt.normal);
        Json pose{{"split", v.train ? "train" : "test"}, {"camera", to_json(v.gt.camera)}};
        write_bytes(vdir / "pose.json", pose.dump(2) + "\n");
        for (const char* f : {"rgb.png", "transient.bin", "sparse_depth.csv", "gt_depth.pfm", "gt_normal.pfm",
                              "pose.json"})
            hashes[rel + "/" + f] = sha256_file(vdir / f);
        views.push_back({{"index", k}, {"split", v.train ? "train" : "test"}});
    }
    Json files = Json::object();
    for (const auto& [name, h] : hashes) files[name] = h;
    Json manifest{{"format", "surfelfuse-dataset-1"}, {"config", to_json(bundle.config)}, {"views", views},
                  {"files", files}};
    write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
}

namespace {

bool optional_channel(const std::string& name) {
    return name.ends_with("/transient.bin") || name.ends_with("/sparse_depth.csv");
}

}  // namespace

DatasetBundle load_dataset(const fs::path& dir) {
    Json manifest;
    try {
        manifest = Json::parse(read_bytes(dir / "manifest.json"));
    } catch (const nlohmann::json::exception& e) {
        throw DataError(std::string("manifest.json: ") + e.what());
    }
    if (!manifest.contains("files") || !manifest.contains("views") || !manifest.contains("config"))
        throw DataError("manifest.json is missing required sections");
    for (const auto& [name, h] : manifest["files"].items()) {
        if (!fs::exists(dir / name)) {
            if (optional_channel(name)) continue;
            throw DataError("missing dataset file " + name);
        }
        if (sha256_file(dir / name) != h.get<std::string>()) throw DataError("hash mismatch for " + name);
    }
    DatasetBundle bundle;
    try {
        bundle.config = protocol_from_json(manifest["config"]);
    } catch (const ConfigError& e) {
        throw DataError(std::string("manifest config: ") + e.what());
    }
    const auto& lidar = bundle.config.lidar;
    for (const auto& entry : manifest["views"]) {
        const std::size_t k = entry.at("index").get<std::size_t>();
        const fs::path vdir = dir / "views" / std::to_string(k);
        DatasetView v;
        v.train = entry.at("split").get<std::string>() == "train";
        const Json pose = Json::parse(read_bytes(vdir / "pose.json"));
        try {
            v.gt.camera = camera_from_json(pose.at("camera"));
        } catch (const ConfigError& e) {
            throw DataError(vdir.string() + "/pose.json: " + e.what());
        }
        v.rgb = read_png(vdir / "rgb.png");
        v.gt.rgb = v.rgb;
        if (fs::exists(vdir / "transient.bin"))
            v.gt.transient = read_transient(vdir / "transient.bin", lidar.bin_width_s);
        if (fs::exists(vdir / "sparse_depth.csv")) {
            v.gt.sparse_depth = read_sparse_csv(vdir / "sparse_depth.csv");
            if (v.gt.sparse_depth.size() != static_cast<std::size_t>(lidar.nx) * static_cast<std::size_t>(lidar.ny))
                throw DataError("sparse depth count does not match the LiDAR grid in view " + std::to_string(k));
        }
        v.gt.depth = read_pfm(vdir / "gt_depth.pfm");
        v.gt.normal = read_pfm(vdir / "gt_normal.pfm");
        if (!v.gt.transient.counts.empty() && (v.gt.transient.nx != lidar.nx || v.gt.transient.ny != lidar.ny || v.gt.transient.nt != lidar.n_bins))
            throw DataError("transient shape does not match the LiDAR config in view " + std::to_string(k));
        if (v.rgb.width != v.gt.camera.width || v.rgb.height != v.gt.camera.height)
            throw DataError("image size does not match the camera in view " + std::to_string(k));
        bundle.views.push_back(std::move(v));
    }
    return bundle;
}

void check_channels(const DatasetBundle& bundle, LossMode mode) {
    const auto train = bundle.train_views();
    for (std::size_t i = 0; i < train.size(); ++i) {
        const DatasetView& v = *train[i];
        if (uses_transient(mode) && v.gt.transient.counts.empty())
            throw DataError("mode " + to_string(mode) + " needs transient.bin (missing for training view " +
                            std::to_string(i) + ")");
        if (uses_sparse(mode) && v.gt.sparse_depth.empty())
            throw DataError("mode " + to_string(mode) + " needs sparse_depth.csv (missing for training view " +
                            std::to_string(i) + ")");
    }
}

namespace {

std::string cell(const std::optional<double>& v) {
    if (!v) return "";
    std::ostringstream os;
    os << std::setprecision(17) << *v;
    return os.str();
}

std::string cell(double v) { return cell(std::optional<double>(v)); }

}  // namespace

void write_trace_csv(const fs::path& path, const std::vector<TraceRow>& trace) {
    std::ostringstream os;
    os << "iteration,total,rgb_l1,rgb_ssim,transient_kl,depth_normal_reg,sparse_l1,surfels,test_depth_mae\n";
    for (const auto& r : trace)
        os << r.iteration << ',' << cell(r.loss.total) << ',' << cell(r.loss.rgb_l1) << ',' << cell(r.loss.rgb_ssim)
           << ',' << cell(r.loss.transient_kl) << ',' << cell(r.loss.depth_normal_reg) << ','
           << cell(r.loss.sparse_l1) << ',' << r.surfels << ',' << cell(r.test_depth_mae) << '\n';
    write_text_atomic(path, os.str());
}

void write_report_csv(const fs::path& path, const MetricsReport& report) {
    std::ostringstream os;
    os << "view,psnr,ssim,depth_mae,normal_mae,covered\n";
    auto row = [&](const std::string& name, const ViewMetrics& m) {
        os << name << ',' << cell(m.psnr) << ',' << cell(m.ssim) << ',' << cell(m.depth_mae) << ','
           << cell(m.normal_mae) << ',' << m.covered << '\n';
    };
    for (std::size_t i = 0; i < report.views.size(); ++i) row(std::to_string(i), report.views[i]);
    row("mean", report.mean);
    write_text_atomic(path, os.str());
}

void write_weight_map_csv(const fs::path& path, const PatchWeightMap& map) {
    std::ostringstream os;
    os << "zone_x,zone_y,weight,snr,texture\n";
    for (int y = 0; y < map.ny; ++y)
        for (int x = 0; x < map.nx; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * map.nx + x;
            os << x << ',' << y << ',' << cell(map.weights[i]) << ',' << cell(map.snr[i]) << ','
               << cell(map.texture[i]) << '\n';
        }
    write_text_atomic(path, os.str());
}

void write_weight_map_png(const fs::path& path, const PatchWeightMap& map, int cell_px) {
    if (cell_px < 1) throw InvalidParameter("write_weight_map_png: cell must be >= 1");
    Image img(map.nx * cell_px, map.ny * cell_px, 1);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) img.at(x, y, 0) = map.at(x / cell_px, y / cell_px);
    write_png(path, img);
}

}  // namespace surfelfuse
