#include "l2aed/data.hpp"

#include <png.h>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <sstream>

#include "l2aed/container.hpp"
#include "l2aed/errors.hpp"

namespace l2aed {

namespace fs = std::filesystem;

namespace {

constexpr std::uint64_t kStreamSynthClass = 0x53594E43;    // "SYNC"
constexpr std::uint64_t kStreamSynthExample = 0x53594E45;  // "SYNE"

std::string lower(std::string s) {
    std::transform(s.begin(), s.end(), s.begin(), [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
    return s;
}

// Decoded image as [ch,H,W] in [0,1]; empty optional-like Tensor on failure.
bool decode_png(const fs::path& file, bool grayscale, Tensor& out, std::string& why) {
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    if (!png_image_begin_read_from_file(&image, file.c_str())) {
        why = image.message;
        return false;
    }
    const bool colour_source = (image.format & PNG_FORMAT_FLAG_COLOR) != 0;
    const bool read_rgb = colour_source || !grayscale;
    image.format = read_rgb ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
    const std::size_t h = image.height, w = image.width;
    const std::size_t src_ch = read_rgb ? 3 : 1;
    std::vector<png_byte> buf(h * w * src_ch);
    if (!png_image_finish_read(&image, nullptr, buf.data(), 0, nullptr)) {
        why = image.message;
        png_image_free(&image);
        return false;
    }
    const std::size_t out_ch = grayscale ? 1 : 3;
    out = Tensor(Shape{out_ch, h, w});
    for (std::size_t i = 0; i < h * w; ++i) {
        if (grayscale && read_rgb) {
            const double r = buf[i * 3] / 255.0, g = buf[i * 3 + 1] / 255.0, b = buf[i * 3 + 2] / 255.0;
            out[i] = 0.299 * r + 0.587 * g + 0.114 * b;
        } else {
            for (std::size_t c = 0; c < out_ch; ++c) out[c * h * w + i] = buf[i * src_ch + c] / 255.0;
        }
    }
    return true;
}

}  // namespace

const char* split_name(Split s) noexcept {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "validation";
        case Split::Test: return "test";
    }
    return "?";
}

Split parse_split(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "validation" || s == "val") return Split::Validation;
    if (s == "test") return Split::Test;
    throw ParameterError("unknown split '" + s + "'");
}

std::vector<std::size_t> Dataset::class_ids(Split split) const {
    std::vector<std::size_t> ids;
    for (std::size_t i = 0; i < classes.size(); ++i) {
        if (classes[i].split == split) ids.push_back(i);
    }
    return ids;
}

std::size_t Dataset::num_examples() const {
    std::size_t n = 0;
    for (const auto& c : classes) n += c.examples.size();
    return n;
}

void Dataset::validate() const {
    const Shape expect{channels, height, width};
    for (const auto& c : classes) {
        if (c.examples.empty()) throw DataError("class '" + c.name + "' has no examples");
        if (c.outlier.size() != c.examples.size()) throw DataError("class '" + c.name + "' outlier flags out of sync");
        for (const auto& e : c.examples) {
            if (e.shape() != expect) {
                throw DataError("class '" + c.name + "' has an example of shape " + shape_str(e.shape()) +
                                ", expected " + shape_str(expect));
            }
        }
    }
}

// ---------------------------------------------------------------------------

Tensor resize_bilinear(const Tensor& img, std::size_t out_h, std::size_t out_w) {
    if (img.ndim() != 3) throw ShapeError("resize_bilinear: expected [ch,H,W], got " + shape_str(img.shape()));
    if (out_h == 0 || out_w == 0) throw ParameterError("resize_bilinear: target size must be positive");
    const std::size_t ch = img.dim(0), in_h = img.dim(1), in_w = img.dim(2);
    const double sy = static_cast<double>(in_h) / static_cast<double>(out_h);
    const double sx = static_cast<double>(in_w) / static_cast<double>(out_w);

    struct Tap {
        std::size_t i0, i1;
        double frac;
    };
    auto taps = [](std::size_t out, std::size_t in, double scale) {
        std::vector<Tap> t(out);
        for (std::size_t d = 0; d < out; ++d) {
            double src = (static_cast<double>(d) + 0.5) * scale - 0.5;
            src = std::clamp(src, 0.0, static_cast<double>(in - 1));
            const auto i0 = static_cast<std::size_t>(std::floor(src));
            t[d] = Tap{i0, std::min(i0 + 1, in - 1), src - static_cast<double>(i0)};
        }
        return t;
    };
    const auto ty = taps(out_h, in_h, sy);
    const auto tx = taps(out_w, in_w, sx);

    Tensor out(Shape{ch, out_h, out_w});
    for (std::size_t c = 0; c < ch; ++c) {
        const double* src = img.ptr() + c * in_h * in_w;
        double* dst = out.ptr() + c * out_h * out_w;
        for (std::size_t y = 0; y < out_h; ++y) {
            const Tap& a = ty[y];
            for (std::size_t x = 0; x < out_w; ++x) {
                const Tap& b = tx[x];
                const double top = src[a.i0 * in_w + b.i0] * (1.0 - b.frac) + src[a.i0 * in_w + b.i1] * b.frac;
                const double bot = src[a.i1 * in_w + b.i0] * (1.0 - b.frac) + src[a.i1 * in_w + b.i1] * b.frac;
                dst[y * out_w + x] = top * (1.0 - a.frac) + bot * a.frac;
            }
        }
    }
    return out;
}

Tensor rotate90(const Tensor& img, int quarter_turns) {
    if (img.ndim() != 3 || img.dim(1) != img.dim(2)) {
        throw ShapeError("rotate90: expected a square [ch,n,n] image, got " + shape_str(img.shape()));
    }
    const int turns = ((quarter_turns % 4) + 4) % 4;
    Tensor cur = img;
    const std::size_t ch = img.dim(0), n = img.dim(1);
    for (int t = 0; t < turns; ++t) {
        Tensor next(img.shape());
        for (std::size_t c = 0; c < ch; ++c) {
            const double* src = cur.ptr() + c * n * n;
            double* dst = next.ptr() + c * n * n;
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t j = 0; j < n; ++j) dst[i * n + j] = src[j * n + (n - 1 - i)];
            }
        }
        cur = std::move(next);
    }
    return cur;
}

Dataset augment_rotations(const Dataset& ds) {
    if (ds.height != ds.width) throw ShapeError("augment_rotations: images must be square");
    Dataset out;
    out.channels = ds.channels;
    out.height = ds.height;
    out.width = ds.width;
    out.provenance = ds.provenance + "; rotations x4";
    out.classes.reserve(ds.classes.size() * 4);
    for (const auto& c : ds.classes) {
        for (int turns = 0; turns < 4; ++turns) {
            ClassData r;
            r.name = c.name + "/rot" + std::to_string(turns * 90);
            r.split = c.split;
            r.outlier = c.outlier;
            r.examples.reserve(c.examples.size());
            for (const auto& e : c.examples) r.examples.push_back(rotate90(e, turns));
            out.classes.push_back(std::move(r));
        }
    }
    return out;
}

Dataset split_classes(Dataset ds, const SplitCounts& counts, Rng& rng) {
    const std::size_t total = counts.train + counts.validation + counts.test;
    if (total != ds.classes.size()) {
        throw ParameterError("split_classes: counts sum to " + std::to_string(total) + " but dataset has " +
                             std::to_string(ds.classes.size()) + " classes");
    }
    std::vector<std::size_t> order(ds.classes.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    rng.shuffle(order);
    for (std::size_t k = 0; k < order.size(); ++k) {
        Split s = Split::Train;
        if (k >= counts.train) s = Split::Validation;
        if (k >= counts.train + counts.validation) s = Split::Test;
        ds.classes[order[k]].split = s;
    }
    return ds;
}

// ---------------------------------------------------------------------------

Dataset load_image_dataset(const fs::path& root, std::size_t target_size, bool grayscale, bool invert,
                           LoadStats* stats) {
    if (target_size == 0) throw ParameterError("load_image_dataset: target size must be positive");
    if (!fs::is_directory(root)) throw DataError("dataset root '" + root.string() + "' is not a directory");
    std::vector<fs::path> class_dirs;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) class_dirs.push_back(entry.path());
    }
    std::sort(class_dirs.begin(), class_dirs.end());
    if (class_dirs.empty()) throw DataError("dataset root '" + root.string() + "' has no class directories");

    LoadStats local;
    LoadStats& st = stats ? *stats : local;
    Dataset ds;
    ds.channels = grayscale ? 1 : 3;
    ds.height = ds.width = target_size;
    ds.provenance = "images root=" + root.string() + " size=" + std::to_string(target_size) +
                    (grayscale ? " grayscale" : " colour") + (invert ? " inverted" : "");
    for (const auto& dir : class_dirs) {
        std::vector<fs::path> files;
        for (const auto& entry : fs::directory_iterator(dir)) {
            if (entry.is_regular_file() && lower(entry.path().extension().string()) == ".png") {
                files.push_back(entry.path());
            }
        }
        std::sort(files.begin(), files.end());
        ClassData cls;
        cls.name = dir.filename().string();
        for (const auto& f : files) {
            Tensor img;
            std::string why;
            if (!decode_png(f, grayscale, img, why)) {
                ++st.skipped;
                st.warnings.push_back("skipping '" + f.string() + "': " + why);
                continue;
            }
            if (img.dim(1) != target_size || img.dim(2) != target_size) {
                img = resize_bilinear(img, target_size, target_size);
            }
            if (invert) {
                for (double& v : img.data()) v = 1.0 - v;
            }
            cls.examples.push_back(std::move(img));
            cls.outlier.push_back(0);
            ++st.loaded;
        }
        if (cls.examples.empty()) throw DataError("class directory '" + dir.string() + "' has no decodable images");
        ds.classes.push_back(std::move(cls));
    }
    return ds;
}

void write_png(const fs::path& path, const Tensor& img) {
    if (img.ndim() != 3 || (img.dim(0) != 1 && img.dim(0) != 3)) {
        throw ShapeError("write_png: expected [1,H,W] or [3,H,W], got " + shape_str(img.shape()));
    }
    const std::size_t ch = img.dim(0), h = img.dim(1), w = img.dim(2);
    std::vector<png_byte> buf(h * w * ch);
    for (std::size_t i = 0; i < h * w; ++i) {
        for (std::size_t c = 0; c < ch; ++c) {
            const double v = std::clamp(img[c * h * w + i], 0.0, 1.0);
            buf[i * ch + c] = static_cast<png_byte>(std::lround(v * 255.0));
        }
    }
    png_image image{};
    image.version = PNG_IMAGE_VERSION;
    image.width = static_cast<png_uint_32>(w);
    image.height = static_cast<png_uint_32>(h);
    image.format = ch == 1 ? PNG_FORMAT_GRAY : PNG_FORMAT_RGB;
    if (!png_image_write_to_file(&image, path.c_str(), 0, buf.data(), 0, nullptr)) {
        const std::string why = image.message;
        png_image_free(&image);
        throw DataError("cannot write PNG '" + path.string() + "': " + why);
    }
}

// ---------------------------------------------------------------------------

namespace {

struct PatternParams {
    double bar_x, bar_y, bar_angle, bar_half_len, bar_sigma;
    double blob_x, blob_y, blob_sigma;
};

PatternParams pattern_params(const SynthParams& p, std::size_t class_id) {
    Rng rng(derive_seed(p.seed, kStreamSynthClass, class_id));
    const double s = static_cast<double>(p.image_size);
    PatternParams q{};
    q.bar_x = s * (0.3 + 0.4 * rng.uniform());
    q.bar_y = s * (0.3 + 0.4 * rng.uniform());
    q.bar_angle = std::numbers::pi * rng.uniform();
    q.bar_half_len = s * (0.18 + 0.17 * rng.uniform());
    q.bar_sigma = s * 0.05;
    q.blob_x = s * (0.2 + 0.6 * rng.uniform());
    q.blob_y = s * (0.2 + 0.6 * rng.uniform());
    q.blob_sigma = s * (0.05 + 0.06 * rng.uniform());
    return q;
}

Tensor render(const SynthParams& p, const PatternParams& q) {
    const std::size_t n = p.image_size;
    Tensor img(Shape{1, n, n});
    const double ca = std::cos(q.bar_angle), sa = std::sin(q.bar_angle);
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            const double y = static_cast<double>(i) + 0.5, x = static_cast<double>(j) + 0.5;
            const double dx = x - q.bar_x, dy = y - q.bar_y;
            const double along = std::abs(dx * ca + dy * sa);
            const double perp = -dx * sa + dy * ca;
            const double over = std::max(0.0, along - q.bar_half_len);
            const double bar = std::exp(-(perp * perp + over * over) / (2.0 * q.bar_sigma * q.bar_sigma));
            const double bx = x - q.blob_x, by = y - q.blob_y;
            const double blob = std::exp(-(bx * bx + by * by) / (2.0 * q.blob_sigma * q.blob_sigma));
            img[i * n + j] = std::max(bar, blob);
        }
    }
    return img;
}

void check_synth(const SynthParams& p) {
    if (p.num_classes == 0 || p.per_class == 0 || p.image_size == 0) {
        throw ParameterError("synth_dataset: class count, examples per class and image size must be positive");
    }
    if (!(p.noise_sd >= 0.0)) throw ParameterError("synth_dataset: noise_sd must be non-negative");
    if (!(p.outlier_rate >= 0.0 && p.outlier_rate < 1.0)) {
        throw ParameterError("synth_dataset: outlier_rate must lie in [0, 1)");
    }
    if (p.outlier_rate > 0.0 && p.num_classes < 2) throw ParameterError("synth_dataset: outliers need two classes");
}

}  // namespace

Tensor synth_pattern(const SynthParams& p, std::size_t class_id) {
    check_synth(p);
    return render(p, pattern_params(p, class_id));
}

Dataset synth_dataset(const SynthParams& p) {
    check_synth(p);
    std::vector<Tensor> patterns;
    patterns.reserve(p.num_classes);
    for (std::size_t c = 0; c < p.num_classes; ++c) patterns.push_back(render(p, pattern_params(p, c)));

    Dataset ds;
    ds.channels = 1;
    ds.height = ds.width = p.image_size;
    std::ostringstream prov;
    prov << "synth classes=" << p.num_classes << " per_class=" << p.per_class << " size=" << p.image_size
         << " noise_sd=" << p.noise_sd << " outlier_rate=" << p.outlier_rate << " seed=" << p.seed;
    ds.provenance = prov.str();
    for (std::size_t c = 0; c < p.num_classes; ++c) {
        ClassData cls;
        cls.name = "synth" + std::to_string(c);
        for (std::size_t e = 0; e < p.per_class; ++e) {
            Rng rng(derive_seed(p.seed, kStreamSynthExample, (static_cast<std::uint64_t>(c) << 32) | e));
            std::size_t source = c;
            std::uint8_t planted = 0;
            if (p.outlier_rate > 0.0 && rng.bernoulli(p.outlier_rate)) {
                source = rng.below(p.num_classes - 1);
                if (source >= c) ++source;
                planted = 1;
            }
            Tensor img = patterns[source];
            if (p.noise_sd > 0.0) {
                for (double& v : img.data()) v = std::clamp(v + p.noise_sd * rng.normal(), 0.0, 1.0);
            }
            cls.examples.push_back(std::move(img));
            cls.outlier.push_back(planted);
        }
        ds.classes.push_back(std::move(cls));
    }
    return ds;
}

// ---------------------------------------------------------------------------

void save_dataset(const fs::path& path, const Dataset& ds) {
    ds.validate();
    Container c;
    c.meta["kind"] = "dataset";
    c.meta["channels"] = std::to_string(ds.channels);
    c.meta["height"] = std::to_string(ds.height);
    c.meta["width"] = std::to_string(ds.width);
    c.meta["provenance"] = ds.provenance;
    c.meta["classes"] = std::to_string(ds.classes.size());
    for (std::size_t i = 0; i < ds.classes.size(); ++i) {
        const auto& cls = ds.classes[i];
        const std::string key = "class." + std::to_string(i);
        c.meta[key + ".name"] = cls.name;
        c.meta[key + ".split"] = split_name(cls.split);
        Tensor stacked(Shape{cls.examples.size(), ds.channels, ds.height, ds.width});
        const std::size_t per = ds.channels * ds.height * ds.width;
        for (std::size_t e = 0; e < cls.examples.size(); ++e) {
            std::copy_n(cls.examples[e].ptr(), per, stacked.ptr() + e * per);
        }
        c.arrays.emplace_back(key, std::move(stacked));
        Tensor flags(Shape{cls.outlier.size()});
        for (std::size_t e = 0; e < cls.outlier.size(); ++e) flags[e] = cls.outlier[e];
        c.arrays.emplace_back(key + ".outlier", std::move(flags));
    }
    write_container(path, c);
}

Dataset load_dataset(const fs::path& path) {
    const Container c = read_container(path);
    if (c.get("kind") != "dataset") throw DataError(path.string() + " is not a dataset cache");
    Dataset ds;
    ds.channels = std::stoul(c.get("channels"));
    ds.height = std::stoul(c.get("height"));
    ds.width = std::stoul(c.get("width"));
    ds.provenance = c.get("provenance");
    const std::size_t n = std::stoul(c.get("classes"));
    for (std::size_t i = 0; i < n; ++i) {
        const std::string key = "class." + std::to_string(i);
        ClassData cls;
        cls.name = c.get(key + ".name");
        cls.split = parse_split(c.get(key + ".split"));
        const Tensor& stacked = c.array(key);
        const Tensor& flags = c.array(key + ".outlier");
        for (std::size_t e = 0; e < stacked.dim(0); ++e) {
            cls.examples.push_back(stacked.slice0(e));
            cls.outlier.push_back(static_cast<std::uint8_t>(flags[e] != 0.0));
        }
        ds.classes.push_back(std::move(cls));
    }
    ds.validate();
    return ds;
}

}  // namespace l2aed
