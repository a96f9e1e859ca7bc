#include "l2aed/container.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>

#include "l2aed/errors.hpp"

namespace l2aed {

namespace {

constexpr std::array<char, 8> kMagic = {'L', '2', 'A', 'E', 'D', 'C', 'K', '1'};

class Writer {
public:
    explicit Writer(std::ostream& os) : os_(os) {}

    void u32(std::uint32_t v) { le(v, 4); }
    void u64(std::uint64_t v) { le(v, 8); }
    void f64(double v) { le(std::bit_cast<std::uint64_t>(v), 8); }
    void str(const std::string& s) {
        u32(static_cast<std::uint32_t>(s.size()));
        os_.write(s.data(), static_cast<std::streamsize>(s.size()));
    }

private:
    void le(std::uint64_t v, int bytes) {
        char buf[8];
        for (int i = 0; i < bytes; ++i) buf[i] = static_cast<char>((v >> (8 * i)) & 0xFF);
        os_.write(buf, bytes);
    }
    std::ostream& os_;
};

class Reader {
public:
    Reader(std::istream& is, std::string origin) : is_(is), origin_(std::move(origin)) {}

    std::uint32_t u32() { return static_cast<std::uint32_t>(le(4)); }
    std::uint64_t u64() { return le(8); }
    double f64() { return std::bit_cast<double>(le(8)); }
    std::string str() {
        const std::uint32_t n = u32();
        std::string s(n, '\0');
        read(s.data(), n);
        return s;
    }
    void read(char* dst, std::size_t n) {
        is_.read(dst, static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(is_.gcount()) != n) throw DataError(origin_ + ": truncated container");
    }

private:
    std::uint64_t le(int bytes) {
        unsigned char buf[8];
        read(reinterpret_cast<char*>(buf), static_cast<std::size_t>(bytes));
        std::uint64_t v = 0;
        for (int i = 0; i < bytes; ++i) v |= static_cast<std::uint64_t>(buf[i]) << (8 * i);
        return v;
    }
    std::istream& is_;
    std::string origin_;
};

}  // namespace

const Tensor& Container::array(const std::string& name) const {
    for (const auto& [n, t] : arrays) {
        if (n == name) return t;
    }
    throw DataError("container has no array '" + name + "'");
}

bool Container::has_array(const std::string& name) const {
    return std::any_of(arrays.begin(), arrays.end(), [&](const auto& a) { return a.first == name; });
}

const std::string& Container::get(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw DataError("container has no metadata key '" + key + "'");
    return it->second;
}

void write_container(const std::filesystem::path& path, const Container& c) {
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open '" + path.string() + "' for writing");
    os.write(kMagic.data(), kMagic.size());
    Writer w(os);
    w.u32(Container::kVersion);
    w.u32(static_cast<std::uint32_t>(c.meta.size()));
    for (const auto& [k, v] : c.meta) {
        w.str(k);
        w.str(v);
    }
    w.u32(static_cast<std::uint32_t>(c.arrays.size()));
    for (const auto& [name, t] : c.arrays) {
        w.str(name);
        w.u32(static_cast<std::uint32_t>(t.ndim()));
        for (auto d : t.shape()) w.u64(d);
        for (double v : t.data()) w.f64(v);
    }
    if (!os) throw DataError("write to '" + path.string() + "' failed");
}

Container read_container(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open '" + path.string() + "'");
    Reader r(is, path.string());
    std::array<char, 8> magic{};
    r.read(magic.data(), magic.size());
    if (magic != kMagic) throw DataError(path.string() + ": not an l2aed container");
    const std::uint32_t version = r.u32();
    if (version != Container::kVersion) {
        throw DataError(path.string() + ": unsupported container version " + std::to_string(version));
    }
    Container c;
    const std::uint32_t n_meta = r.u32();
    for (std::uint32_t i = 0; i < n_meta; ++i) {
        std::string k = r.str();
        c.meta[std::move(k)] = r.str();
    }
    const std::uint32_t n_arrays = r.u32();
    for (std::uint32_t i = 0; i < n_arrays; ++i) {
        std::string name = r.str();
        const std::uint32_t ndim = r.u32();
        if (ndim == 0 || ndim > 8) throw DataError(path.string() + ": bad rank for array '" + name + "'");
        Shape shape(ndim);
        for (auto& d : shape) d = r.u64();
        std::vector<double> data(shape_numel(shape));
        for (double& v : data) v = r.f64();
        c.arrays.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
    }
    return c;
}

}  // namespace l2aed
