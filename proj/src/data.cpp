#include "gdfd/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <iterator>
#include <limits>
#include <set>
#include <sstream>

namespace gdfd {

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

Tensorf Dataset::gather(const std::vector<std::size_t>& idx) const {
    const std::size_t n = idx.size();
    const std::size_t per = images.numel() / std::max<std::size_t>(1, images.dim(0));
    Tensorf out({n, images.dim(1), images.dim(2), images.dim(3)});
    for (std::size_t i = 0; i < n; ++i) {
        if (idx[i] >= size()) throw ParamError("dataset gather: index out of range");
        std::memcpy(out.data.data() + i * per, images.data.data() + idx[i] * per,
                    per * sizeof(float));
    }
    return out;
}

std::vector<int> Dataset::gather_labels(const std::vector<std::size_t>& idx) const {
    std::vector<int> out(idx.size());
    for (std::size_t i = 0; i < idx.size(); ++i) {
        if (idx[i] >= size()) throw ParamError("dataset gather: index out of range");
        out[i] = labels[idx[i]];
    }
    return out;
}

void Dataset::validate() const {
    if (images.shape.size() != 4) throw DataError("dataset: images must be N x C x H x W");
    if (images.dim(0) != labels.size()) throw DataError("dataset: image/label count mismatch");
    for (float v : images.data)
        if (!(v >= -1.0f && v <= 1.0f)) throw DataError("dataset: pixel outside [-1, 1]");
    for (int l : labels)
        if (l < 0 || l >= class_count) throw DataError("dataset: label outside [0, K)");
}

// ---------------------------------------------------------------------------
// Procedural toy dataset
// ---------------------------------------------------------------------------

namespace {

void render_archetype(int cls, int S, Rng& rng, float* px) {
    const double fg = 0.7 + 0.2 * rng.uniform();
    const double bg = -0.9 + 0.2 * rng.uniform();
    auto fill = [&](auto&& pred) {
        for (int r = 0; r < S; ++r)
            for (int c = 0; c < S; ++c)
                px[r * S + c] = static_cast<float>(pred(r, c) ? fg : bg);
    };
    switch (cls) {
    case 0: { // horizontal bars
        const int phase = static_cast<int>(rng.below(4));
        fill([&](int r, int) { return ((r + phase) >> 1) & 1; });
        break;
    }
    case 1: { // vertical bars
        const int phase = static_cast<int>(rng.below(4));
        fill([&](int, int c) { return ((c + phase) >> 1) & 1; });
        break;
    }
    case 2: { // checkerboard
        const int pr = static_cast<int>(rng.below(8));
        const int pc = static_cast<int>(rng.below(8));
        fill([&](int r, int c) { return (((r + pr) >> 2) + ((c + pc) >> 2)) & 1; });
        break;
    }
    case 3: { // ring
        const double cy = S / 2.0 + rng.uniform(-1.5, 1.5);
        const double cx = S / 2.0 + rng.uniform(-1.5, 1.5);
        const double r0 = S * (0.26 + 0.08 * rng.uniform());
        const double th = S * (0.06 + 0.04 * rng.uniform());
        fill([&](int r, int c) { return std::abs(std::hypot(r - cy, c - cx) - r0) < th; });
        break;
    }
    case 4: { // axis-aligned cross
        const double cy = S / 2.0 + rng.uniform(-1.5, 1.5);
        const double cx = S / 2.0 + rng.uniform(-1.5, 1.5);
        const double w = 1.0 + 1.5 * rng.uniform();
        fill([&](int r, int c) { return std::abs(r - cy) < w || std::abs(c - cx) < w; });
        break;
    }
    case 5: { // single diagonal stripe
        const double off = rng.uniform(-3.0, 3.0);
        const double w = 1.5 + 1.5 * rng.uniform();
        fill([&](int r, int c) { return std::abs(r - c + off) < w; });
        break;
    }
    case 6: { // corner blob
        const double cy = S * 0.22 + rng.uniform(-1.0, 1.0);
        const double cx = S * 0.22 + rng.uniform(-1.0, 1.0);
        const double sigma = S * (0.10 + 0.05 * rng.uniform());
        for (int r = 0; r < S; ++r)
            for (int c = 0; c < S; ++c) {
                const double d2 = (r - cy) * (r - cy) + (c - cx) * (c - cx);
                px[r * S + c] =
                    static_cast<float>(bg + (fg - bg) * std::exp(-d2 / (2.0 * sigma * sigma)));
            }
        break;
    }
    case 7: { // filled center square
        const double cy = S / 2.0 + rng.uniform(-1.5, 1.5);
        const double cx = S / 2.0 + rng.uniform(-1.5, 1.5);
        const double h = S * (0.16 + 0.08 * rng.uniform());
        fill([&](int r, int c) {
            return std::max(std::abs(r - cy), std::abs(c - cx)) < h;
        });
        break;
    }
    case 8: { // horizontal ramp
        const double lo = -0.9 + 0.2 * rng.uniform();
        const double hi = 0.5 + 0.4 * rng.uniform();
        for (int r = 0; r < S; ++r)
            for (int c = 0; c < S; ++c)
                px[r * S + c] = static_cast<float>(lo + (hi - lo) * c / (S - 1.0));
        break;
    }
    default: { // both diagonals
        const double o1 = rng.uniform(-2.0, 2.0);
        const double o2 = rng.uniform(-2.0, 2.0);
        const double w = 1.2 + 1.0 * rng.uniform();
        fill([&](int r, int c) {
            return std::abs(r - c + o1) < w || std::abs(r + c - (S - 1.0) + o2) < w;
        });
        break;
    }
    }
}

Dataset make_toy_split(std::uint64_t seed, std::size_t n, int K, int S, int C,
                       const char* split) {
    Dataset d;
    d.class_count = K;
    d.split = split;
    d.labels.resize(n);
    d.images = Tensorf::zeros({n, static_cast<std::size_t>(C), static_cast<std::size_t>(S),
                               static_cast<std::size_t>(S)});
    Rng rng(seed);
    std::vector<float> gray(static_cast<std::size_t>(S) * S);
    const std::size_t plane = gray.size();
    for (std::size_t i = 0; i < n; ++i) {
        const int cls = static_cast<int>(i % static_cast<std::size_t>(K));
        d.labels[i] = cls;
        render_archetype(cls, S, rng, gray.data());
        float* base = d.images.data.data() + i * static_cast<std::size_t>(C) * plane;
        for (std::size_t p = 0; p < plane; ++p) {
            float v = gray[p] + 0.1f * static_cast<float>(rng.normal());
            v = std::clamp(v, -1.0f, 1.0f);
            for (int ch = 0; ch < C; ++ch) base[static_cast<std::size_t>(ch) * plane + p] = v;
        }
    }
    return d;
}

} // namespace

std::pair<Dataset, Dataset> gen_toy_dataset(std::uint64_t seed, std::size_t n_train,
                                            std::size_t n_test, int class_count, int size,
                                            int channels) {
    if (class_count < 1 || class_count > 10)
        throw ParamError("toy dataset: class_count must be in [1, 10] (10 built-in archetypes)");
    if (size < 8) throw ParamError("toy dataset: size must be at least 8");
    if (channels < 1) throw ParamError("toy dataset: channels must be positive");
    return {make_toy_split(derive_seed(seed, 0), n_train, class_count, size, channels, "train"),
            make_toy_split(derive_seed(seed, 1), n_test, class_count, size, channels, "test")};
}

// ---------------------------------------------------------------------------
// IDX
// ---------------------------------------------------------------------------

namespace {

std::vector<unsigned char> read_file_bytes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open '" + path + "'");
    std::vector<unsigned char> bytes{std::istreambuf_iterator<char>(f),
                                     std::istreambuf_iterator<char>()};
    return bytes;
}

struct ByteCursor {
    const std::vector<unsigned char>& buf;
    std::size_t pos = 0;
    std::string what;

    void need(std::size_t n) const {
        if (pos + n > buf.size()) throw DataError("truncated " + what);
    }
    std::uint32_t u32be() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v = (v << 8) | buf[pos++];
        return v;
    }
    std::uint8_t u8() {
        need(1);
        return buf[pos++];
    }
    std::uint32_t u32le() {
        need(4);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) v = (v << 8) | buf[pos + static_cast<std::size_t>(i)];
        pos += 4;
        return v;
    }
    std::uint64_t u64le() {
        need(8);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) v = (v << 8) | buf[pos + static_cast<std::size_t>(i)];
        pos += 8;
        return v;
    }
    std::string str() {
        const std::uint32_t len = u32le();
        need(len);
        std::string s(reinterpret_cast<const char*>(buf.data()) + pos, len);
        pos += len;
        return s;
    }
};

} // namespace

Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    const auto ibytes = read_file_bytes(images_path);
    ByteCursor ic{ibytes, 0, "IDX image file '" + images_path + "'"};
    const std::uint32_t imagic = ic.u32be();
    if (imagic != 0x00000803u)
        throw DataError("bad IDX image magic in '" + images_path + "'");
    const std::uint32_t n = ic.u32be();
    const std::uint32_t rows = ic.u32be();
    const std::uint32_t cols = ic.u32be();
    const std::size_t count = static_cast<std::size_t>(n) * rows * cols;
    ic.need(count);

    const auto lbytes = read_file_bytes(labels_path);
    ByteCursor lc{lbytes, 0, "IDX label file '" + labels_path + "'"};
    const std::uint32_t lmagic = lc.u32be();
    if (lmagic != 0x00000801u)
        throw DataError("bad IDX label magic in '" + labels_path + "'");
    const std::uint32_t nl = lc.u32be();
    if (nl != n)
        throw DataError("IDX count mismatch: " + std::to_string(n) + " images vs " +
                        std::to_string(nl) + " labels");
    lc.need(n);
    if (n == 0) throw DataError("empty IDX dataset");

    Dataset d;
    d.split = "idx";
    d.images = Tensorf({n, 1, rows, cols});
    for (std::size_t i = 0; i < count; ++i)
        d.images.data[i] = static_cast<float>(ibytes[ic.pos + i]) / 127.5f - 1.0f;
    d.labels.resize(n);
    int maxl = 0;
    for (std::uint32_t i = 0; i < n; ++i) {
        d.labels[i] = lbytes[lc.pos + i];
        maxl = std::max(maxl, d.labels[i]);
    }
    d.class_count = maxl + 1;
    return d;
}

// ---------------------------------------------------------------------------
// Image export
// ---------------------------------------------------------------------------

namespace {

unsigned char quantize_pixel(float x) {
    const double v = std::floor((static_cast<double>(x) + 1.0) / 2.0 * 255.0 + 0.5);
    return static_cast<unsigned char>(std::clamp(v, 0.0, 255.0));
}

} // namespace

void write_image(const Tensorf& image, const std::string& path, ImageFormat format) {
    if (image.shape.size() != 3)
        throw ShapeError("write_image: expected C x H x W, got " + shape_str(image.shape));
    const std::size_t c = image.dim(0), h = image.dim(1), w = image.dim(2);
    if (format == ImageFormat::Pgm && c != 1)
        throw ParamError("write_image: pgm requires 1 channel, got " + std::to_string(c));
    if (format == ImageFormat::Ppm && c != 3)
        throw ParamError("write_image: ppm requires 3 channels, got " + std::to_string(c));

    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path + "'");
    f << (format == ImageFormat::Pgm ? "P5" : "P6") << "\n" << w << " " << h << "\n255\n";
    std::vector<unsigned char> row(w * c);
    for (std::size_t r = 0; r < h; ++r) {
        for (std::size_t col = 0; col < w; ++col)
            for (std::size_t ch = 0; ch < c; ++ch)
                row[col * c + ch] = quantize_pixel(image.data[(ch * h + r) * w + col]);
        f.write(reinterpret_cast<const char*>(row.data()), static_cast<std::streamsize>(row.size()));
    }
    if (!f.good()) throw DataError("write failed for '" + path + "'");
}

void write_image_grid(const Tensorf& images, std::size_t cols, const std::string& path,
                      ImageFormat format) {
    if (images.shape.size() != 4)
        throw ShapeError("write_image_grid: expected N x C x H x W, got " +
                         shape_str(images.shape));
    if (cols < 1) throw ParamError("write_image_grid: cols must be positive");
    const std::size_t n = images.dim(0), c = images.dim(1), h = images.dim(2), w = images.dim(3);
    const std::size_t rows = (n + cols - 1) / cols;
    Tensorf grid = Tensorf::full({c, rows * h, cols * w}, -1.0f);
    for (std::size_t i = 0; i < n; ++i) {
        const std::size_t gr = (i / cols) * h, gc = (i % cols) * w;
        for (std::size_t ch = 0; ch < c; ++ch)
            for (std::size_t r = 0; r < h; ++r)
                for (std::size_t col = 0; col < w; ++col)
                    grid.data[(ch * rows * h + gr + r) * cols * w + gc + col] =
                        images.data[((i * c + ch) * h + r) * w + col];
    }
    write_image(grid, path, format);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

void Checkpoint::set_meta(const std::string& key, const std::string& value) {
    for (auto& [k, v] : metadata)
        if (k == key) {
            v = value;
            return;
        }
    metadata.emplace_back(key, value);
}

const std::string* Checkpoint::find_meta(const std::string& key) const {
    for (const auto& [k, v] : metadata)
        if (k == key) return &v;
    return nullptr;
}

const std::string& Checkpoint::meta(const std::string& key) const {
    const std::string* v = find_meta(key);
    if (!v) throw DataError("checkpoint: missing metadata '" + key + "'");
    return *v;
}

void Checkpoint::add(const std::string& name, const Tensor<float>& t) {
    if (find(name)) throw ParamError("checkpoint: duplicate tensor name '" + name + "'");
    tensors.push_back(CheckpointTensor{name, 0, t.shape, t.data, {}});
}

void Checkpoint::add(const std::string& name, const Tensor<double>& t) {
    if (find(name)) throw ParamError("checkpoint: duplicate tensor name '" + name + "'");
    tensors.push_back(CheckpointTensor{name, 1, t.shape, {}, t.data});
}

const CheckpointTensor* Checkpoint::find(const std::string& name) const {
    for (const auto& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

Tensorf Checkpoint::get_f32(const std::string& name) const {
    const CheckpointTensor* t = find(name);
    if (!t) throw DataError("checkpoint: missing tensor '" + name + "'");
    if (t->dtype != 0) throw DataError("checkpoint: tensor '" + name + "' is not f32");
    return Tensorf(t->dims, t->f32);
}

Tensord Checkpoint::get_f64(const std::string& name) const {
    const CheckpointTensor* t = find(name);
    if (!t) throw DataError("checkpoint: missing tensor '" + name + "'");
    if (t->dtype != 1) throw DataError("checkpoint: tensor '" + name + "' is not f64");
    return Tensord(t->dims, t->f64);
}

namespace {

constexpr std::uint32_t kCheckpointVersion = 1;

void put_u8(std::vector<unsigned char>& buf, std::uint8_t v) { buf.push_back(v); }

void put_u32(std::vector<unsigned char>& buf, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_u64(std::vector<unsigned char>& buf, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) buf.push_back(static_cast<unsigned char>(v >> (8 * i)));
}

void put_str(std::vector<unsigned char>& buf, const std::string& s) {
    put_u32(buf, static_cast<std::uint32_t>(s.size()));
    buf.insert(buf.end(), s.begin(), s.end());
}

} // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::set<std::string> seen;
    for (const auto& t : ckpt.tensors)
        if (!seen.insert(t.name).second)
            throw ParamError("checkpoint: duplicate tensor name '" + t.name + "'");

    std::vector<unsigned char> buf;
    buf.insert(buf.end(), {'G', 'D', 'F', 'D'});
    put_u32(buf, kCheckpointVersion);
    put_u32(buf, static_cast<std::uint32_t>(ckpt.metadata.size()));
    for (const auto& [k, v] : ckpt.metadata) {
        put_str(buf, k);
        put_str(buf, v);
    }
    put_u32(buf, static_cast<std::uint32_t>(ckpt.tensors.size()));
    for (const auto& t : ckpt.tensors) {
        put_str(buf, t.name);
        put_u8(buf, t.dtype);
        put_u8(buf, static_cast<std::uint8_t>(t.dims.size()));
        for (std::size_t d : t.dims) put_u64(buf, d);
        if (t.dtype == 0) {
            for (float v : t.f32) put_u32(buf, std::bit_cast<std::uint32_t>(v));
        } else {
            for (double v : t.f64) put_u64(buf, std::bit_cast<std::uint64_t>(v));
        }
    }
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path + "'");
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f.good()) throw DataError("write failed for '" + path + "'");
}

Checkpoint load_checkpoint(const std::string& path) {
    const auto bytes = read_file_bytes(path);
    ByteCursor cur{bytes, 0, "checkpoint '" + path + "'"};
    cur.need(4);
    if (std::memcmp(bytes.data(), "GDFD", 4) != 0)
        throw DataError("bad checkpoint magic in '" + path + "'");
    cur.pos = 4;
    const std::uint32_t version = cur.u32le();
    if (version != kCheckpointVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(version) + " in '" +
                        path + "'");

    Checkpoint ck;
    const std::uint32_t nmeta = cur.u32le();
    for (std::uint32_t i = 0; i < nmeta; ++i) {
        std::string k = cur.str();
        std::string v = cur.str();
        ck.metadata.emplace_back(std::move(k), std::move(v));
    }
    const std::uint32_t ntensors = cur.u32le();
    for (std::uint32_t i = 0; i < ntensors; ++i) {
        CheckpointTensor t;
        t.name = cur.str();
        if (ck.find(t.name))
            throw DataError("checkpoint: duplicate tensor name '" + t.name + "' in '" + path +
                            "'");
        t.dtype = cur.u8();
        if (t.dtype > 1)
            throw DataError("checkpoint: unknown dtype code " + std::to_string(t.dtype));
        const std::uint8_t rank = cur.u8();
        std::size_t numel = 1;
        for (std::uint8_t d = 0; d < rank; ++d) {
            const std::uint64_t dim = cur.u64le();
            if (dim > (1ull << 32)) throw DataError("checkpoint: implausible dimension");
            t.dims.push_back(static_cast<std::size_t>(dim));
            numel *= static_cast<std::size_t>(dim);
            if (numel > (1ull << 32)) throw DataError("checkpoint: implausible tensor size");
        }
        if (t.dtype == 0) {
            t.f32.resize(numel);
            for (std::size_t j = 0; j < numel; ++j)
                t.f32[j] = std::bit_cast<float>(cur.u32le());
        } else {
            t.f64.resize(numel);
            for (std::size_t j = 0; j < numel; ++j)
                t.f64[j] = std::bit_cast<double>(cur.u64le());
        }
        ck.tensors.push_back(std::move(t));
    }
    return ck;
}

// ---------------------------------------------------------------------------
// Model snapshots
// ---------------------------------------------------------------------------

namespace {

std::string fmt_g17(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

double parse_double_meta(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const double v = std::stod(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("checkpoint: metadata '" + key + "' is not a number: '" + s + "'");
    }
}

long parse_long_meta(const std::string& s, const std::string& key) {
    try {
        std::size_t pos = 0;
        const long v = std::stol(s, &pos);
        if (pos != s.size()) throw std::invalid_argument(s);
        return v;
    } catch (const std::exception&) {
        throw DataError("checkpoint: metadata '" + key + "' is not an integer: '" + s + "'");
    }
}

} // namespace

void save_classifier(ClassifierModel<float>& model, const std::string& path,
                     std::vector<std::pair<std::string, std::string>> extra_meta) {
    Checkpoint ck;
    ck.set_meta("kind", "classifier");
    ck.set_meta("width", fmt_g17(model.cfg.width));
    ck.set_meta("class_count", std::to_string(model.cfg.class_count));
    ck.set_meta("in_channels", std::to_string(model.cfg.in_channels));
    ck.set_meta("input_size", std::to_string(model.cfg.input_size));
    ck.set_meta("frozen", model.frozen ? "1" : "0");
    for (auto& [k, v] : extra_meta) ck.set_meta(k, v);
    for (auto& [name, t] : model.named_tensors()) ck.add(name, *t);
    save_checkpoint(ck, path);
}

ClassifierModel<float> load_classifier(const std::string& path) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.meta("kind") != "classifier")
        throw DataError("checkpoint '" + path + "' is not a classifier (kind=" + ck.meta("kind") +
                        ")");
    ClassifierConfig cfg;
    cfg.width = parse_double_meta(ck.meta("width"), "width");
    cfg.class_count = static_cast<int>(parse_long_meta(ck.meta("class_count"), "class_count"));
    cfg.in_channels = static_cast<int>(parse_long_meta(ck.meta("in_channels"), "in_channels"));
    cfg.input_size = static_cast<int>(parse_long_meta(ck.meta("input_size"), "input_size"));
    ClassifierModel<float> model = build_classifier<float>(cfg, 0);
    for (auto& [name, t] : model.named_tensors()) {
        Tensorf loaded = ck.get_f32(name);
        if (loaded.shape != t->shape)
            throw DataError("checkpoint tensor '" + name + "' has shape " +
                            shape_str(loaded.shape) + ", model expects " + shape_str(t->shape));
        t->data = std::move(loaded.data);
    }
    if (ck.meta("frozen") == "1") model.freeze();
    return model;
}

void save_generator(GeneratorModel<float>& gen, const std::string& path,
                    std::vector<std::pair<std::string, std::string>> extra_meta) {
    Checkpoint ck;
    ck.set_meta("kind", "generator");
    ck.set_meta("latent_dim", std::to_string(gen.cfg.latent_dim));
    ck.set_meta("class_count", std::to_string(gen.cfg.class_count));
    ck.set_meta("out_channels", std::to_string(gen.cfg.out_channels));
    ck.set_meta("target_size", std::to_string(gen.cfg.target_size));
    ck.set_meta("base_size", std::to_string(gen.cfg.base_size));
    ck.set_meta("base_channels", std::to_string(gen.cfg.base_channels));
    for (auto& [k, v] : extra_meta) ck.set_meta(k, v);
    for (auto& [name, t] : gen.named_tensors()) ck.add(name, *t);
    save_checkpoint(ck, path);
}

GeneratorModel<float> load_generator(const std::string& path) {
    const Checkpoint ck = load_checkpoint(path);
    if (ck.meta("kind") != "generator")
        throw DataError("checkpoint '" + path + "' is not a generator (kind=" + ck.meta("kind") +
                        ")");
    GeneratorConfig cfg;
    cfg.latent_dim = static_cast<int>(parse_long_meta(ck.meta("latent_dim"), "latent_dim"));
    cfg.class_count = static_cast<int>(parse_long_meta(ck.meta("class_count"), "class_count"));
    cfg.out_channels = static_cast<int>(parse_long_meta(ck.meta("out_channels"), "out_channels"));
    cfg.target_size = static_cast<int>(parse_long_meta(ck.meta("target_size"), "target_size"));
    cfg.base_size = static_cast<int>(parse_long_meta(ck.meta("base_size"), "base_size"));
    cfg.base_channels =
        static_cast<int>(parse_long_meta(ck.meta("base_channels"), "base_channels"));
    GeneratorModel<float> gen = build_generator<float>(cfg, 0);
    for (auto& [name, t] : gen.named_tensors()) {
        Tensorf loaded = ck.get_f32(name);
        if (loaded.shape != t->shape)
            throw DataError("checkpoint tensor '" + name + "' has shape " +
                            shape_str(loaded.shape) + ", model expects " + shape_str(t->shape));
        t->data = std::move(loaded.data);
    }
    return gen;
}

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::vector<double>>& rows) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot write '" + path + "'");
    f << header << "\n";
    for (const auto& row : rows) {
        for (std::size_t i = 0; i < row.size(); ++i) {
            if (i) f << ",";
            f << fmt_g17(row[i]);
        }
        f << "\n";
    }
    if (!f.good()) throw DataError("write failed for '" + path + "'");
}

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

namespace {

struct ConfigKey {
    std::string name;
    std::function<void(RunConfig&, const std::string&, const std::string&)> set;
    std::function<std::string(const RunConfig&)> get;
};

[[noreturn]] void bad_value(const std::string& where, const std::string& key,
                            const std::string& value) {
    throw ConfigError(where + ": value for '" + key + "' is not a number: '" + value + "'");
}

template <typename T>
ConfigKey make_key(const char* name, T RunConfig::*field) {
    ConfigKey k;
    k.name = name;
    k.set = [name, field](RunConfig& cfg, const std::string& v, const std::string& where) {
        try {
            std::size_t pos = 0;
            if constexpr (std::is_same_v<T, double>) {
                const double parsed = std::stod(v, &pos);
                if (pos != v.size()) bad_value(where, name, v);
                cfg.*field = parsed;
            } else {
                const long long parsed = std::stoll(v, &pos);
                if (pos != v.size()) bad_value(where, name, v);
                if constexpr (std::is_same_v<T, std::uint64_t>) {
                    if (parsed < 0) bad_value(where, name, v);
                    cfg.*field = static_cast<std::uint64_t>(parsed);
                } else {
                    if (parsed < std::numeric_limits<T>::min() ||
                        parsed > std::numeric_limits<T>::max())
                        bad_value(where, name, v);
                    cfg.*field = static_cast<T>(parsed);
                }
            }
        } catch (const ConfigError&) {
            throw;
        } catch (const std::exception&) {
            bad_value(where, name, v);
        }
    };
    k.get = [field](const RunConfig& cfg) {
        if constexpr (std::is_same_v<T, double>) return fmt_g17(cfg.*field);
        else return std::to_string(cfg.*field);
    };
    return k;
}

const std::vector<ConfigKey>& config_keys() {
    static const std::vector<ConfigKey> keys = {
        make_key("seed", &RunConfig::seed),
        make_key("classes", &RunConfig::classes),
        make_key("image_size", &RunConfig::image_size),
        make_key("channels", &RunConfig::channels),
        make_key("train_count", &RunConfig::train_count),
        make_key("test_count", &RunConfig::test_count),
        make_key("teacher_width", &RunConfig::teacher_width),
        make_key("student_width", &RunConfig::student_width),
        make_key("teacher_steps", &RunConfig::teacher_steps),
        make_key("teacher_batch", &RunConfig::teacher_batch),
        make_key("teacher_lr", &RunConfig::teacher_lr),
        make_key("latent_dim", &RunConfig::latent_dim),
        make_key("gen_base_size", &RunConfig::gen_base_size),
        make_key("gen_base_channels", &RunConfig::gen_base_channels),
        make_key("gen_steps", &RunConfig::gen_steps),
        make_key("gen_batch", &RunConfig::gen_batch),
        make_key("gen_lr", &RunConfig::gen_lr),
        make_key("lambda_t", &RunConfig::lambda_t),
        make_key("lambda_l2", &RunConfig::lambda_l2),
        make_key("lambda_s", &RunConfig::lambda_s),
        make_key("tau", &RunConfig::tau),
        make_key("beta1", &RunConfig::beta1),
        make_key("beta2", &RunConfig::beta2),
        make_key("adam_eps", &RunConfig::adam_eps),
        make_key("distill_steps", &RunConfig::distill_steps),
        make_key("distill_batch", &RunConfig::distill_batch),
        make_key("distill_lr", &RunConfig::distill_lr),
        make_key("warmup_steps", &RunConfig::warmup_steps),
        make_key("decay_interval", &RunConfig::decay_interval),
        make_key("decay", &RunConfig::decay),
        make_key("momentum", &RunConfig::momentum),
        make_key("eval_every", &RunConfig::eval_every),
        make_key("stats_per_class", &RunConfig::stats_per_class),
        make_key("synth_steps", &RunConfig::synth_steps),
        make_key("synth_batch", &RunConfig::synth_batch),
        make_key("synth_lr", &RunConfig::synth_lr),
        make_key("generators", &RunConfig::generators),
        make_key("workers", &RunConfig::workers),
    };
    return keys;
}

const ConfigKey* find_key(const std::string& name) {
    for (const auto& k : config_keys())
        if (k.name == name) return &k;
    return nullptr;
}

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

} // namespace

RunConfig parse_config(const std::string& file_text,
                       const std::vector<std::pair<std::string, std::string>>& overrides) {
    RunConfig cfg;
    std::istringstream in(file_text);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::string where = "line " + std::to_string(lineno);
        const std::size_t hash = line.find('#');
        if (hash != std::string::npos) line = line.substr(0, hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError(where + ": expected 'key = value', got '" + line + "'");
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty()) throw ConfigError(where + ": missing key before '='");
        if (value.empty()) throw ConfigError(where + ": missing value for '" + key + "'");
        const ConfigKey* k = find_key(key);
        if (!k) throw ConfigError(where + ": unknown key '" + key + "'");
        k->set(cfg, value, where);
    }
    for (const auto& [key, value] : overrides) {
        const ConfigKey* k = find_key(key);
        if (!k) throw ConfigError("command line: unknown key '" + key + "'");
        k->set(cfg, value, "command line");
    }
    return cfg;
}

RunConfig load_config(const std::string& path,
                      const std::vector<std::pair<std::string, std::string>>& overrides) {
    if (path.empty()) return parse_config("", overrides);
    std::ifstream f(path);
    if (!f) throw DataError("cannot open config '" + path + "'");
    std::stringstream ss;
    ss << f.rdbuf();
    return parse_config(ss.str(), overrides);
}

std::vector<std::pair<std::string, std::string>> config_items(const RunConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& k : config_keys()) out.emplace_back(k.name, k.get(cfg));
    return out;
}

} // namespace gdfd
