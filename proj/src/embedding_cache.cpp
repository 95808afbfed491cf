#include <bit>
#include <cstring>
#include <fstream>
#include <map>

#include "trialmatch/embedding.hpp"
#include "trialmatch/error.hpp"

namespace trialmatch {

namespace {

static_assert(std::endian::native == std::endian::little, "cache I/O assumes a little-endian host");

constexpr char kMagic[4] = {'E', 'M', 'B', 'C'};
constexpr std::size_t kHeaderSize = 4 + 2 + 4 + 8;

class Reader {
public:
    explicit Reader(std::string bytes) : bytes_(std::move(bytes)) {}

    template <typename T>
    T read(const char* what) {
        need(sizeof(T), what);
        T v;
        std::memcpy(&v, bytes_.data() + pos_, sizeof(T));
        pos_ += sizeof(T);
        return v;
    }

    std::string read_bytes(std::size_t n, const char* what) {
        need(n, what);
        std::string out = bytes_.substr(pos_, n);
        pos_ += n;
        return out;
    }

    std::size_t offset() const { return pos_; }
    bool at_end() const { return pos_ == bytes_.size(); }

private:
    void need(std::size_t n, const char* what) const {
        if (bytes_.size() - pos_ < n)
            throw DataError(std::string("embedding cache truncated while reading ") + what + " at offset " +
                            std::to_string(pos_));
    }

    std::string bytes_;
    std::size_t pos_ = 0;
};

std::string slurp(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open embedding cache " + path.string());
    return std::string(std::istreambuf_iterator<char>(in), {});
}

struct Header {
    std::uint32_t dim;
    std::uint64_t count;
};

Header read_header(Reader& r) {
    const auto magic = r.read_bytes(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) throw DataError("embedding cache: bad magic at offset 0");
    const auto version = r.read<std::uint16_t>("version");
    if (version != EmbeddingCache::kVersion)
        throw DataError("embedding cache: unsupported version " + std::to_string(version) + " at offset 4");
    Header h;
    h.dim = r.read<std::uint32_t>("dim");
    h.count = r.read<std::uint64_t>("count");
    return h;
}

template <typename T>
void put(std::string& out, T v) {
    char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    out.append(buf, sizeof(T));
}

}  // namespace

EmbeddingCache::EmbeddingCache(std::filesystem::path path, std::size_t dim) : path_(std::move(path)), dim_(dim) {
    if (dim == 0) throw ConfigError("embedding cache dimension must be positive");
    if (std::filesystem::exists(path_)) load();
}

void EmbeddingCache::load() {
    Reader r(slurp(path_));
    const Header h = read_header(r);
    if (h.dim != dim_)
        throw DimensionMismatchError("embedding cache " + path_.string() + " has dim " + std::to_string(h.dim) +
                                     ", expected " + std::to_string(dim_));
    for (std::uint64_t i = 0; i < h.count; ++i) {
        const auto key_len = r.read<std::uint32_t>("key length");
        auto key = r.read_bytes(key_len, "key");
        std::vector<float> values(dim_);
        for (auto& v : values) v = r.read<float>("vector");
        if (entries_.emplace(key, std::move(values)).second) keys_.push_back(std::move(key));
    }
    if (!r.at_end()) throw DataError("embedding cache: trailing bytes at offset " + std::to_string(r.offset()));
}

std::optional<EmbeddingVector> EmbeddingCache::lookup(const std::string& text) const {
    auto it = entries_.find(text);
    if (it == entries_.end()) return std::nullopt;
    return EmbeddingVector(it->second.begin(), it->second.end());
}

void EmbeddingCache::store(const std::string& text, std::span<const double> vector) {
    if (vector.size() != dim_)
        throw DimensionMismatchError("cache dim is " + std::to_string(dim_) + ", vector has " +
                                     std::to_string(vector.size()));
    std::vector<float> narrowed(vector.begin(), vector.end());
    auto [it, inserted] = entries_.insert_or_assign(text, std::move(narrowed));
    if (inserted) keys_.push_back(text);
}

void EmbeddingCache::flush() const {
    std::string out;
    out.reserve(kHeaderSize + keys_.size() * (4 + 16 + dim_ * 4));
    out.append(kMagic, 4);
    put<std::uint16_t>(out, kVersion);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(dim_));
    put<std::uint64_t>(out, keys_.size());
    for (const auto& key : keys_) {
        put<std::uint32_t>(out, static_cast<std::uint32_t>(key.size()));
        out += key;
        for (float v : entries_.at(key)) put<float>(out, v);
    }
    auto tmp = path_;
    tmp += ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("cannot write embedding cache " + tmp.string());
        f.write(out.data(), static_cast<std::streamsize>(out.size()));
        if (!f) throw DataError("short write on embedding cache " + tmp.string());
    }
    std::filesystem::rename(tmp, path_);
}

std::pair<std::size_t, std::uint64_t> inspect_cache(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open embedding cache " + path.string());
    std::string head(kHeaderSize, '\0');
    in.read(head.data(), static_cast<std::streamsize>(head.size()));
    head.resize(static_cast<std::size_t>(in.gcount()));
    Reader r(std::move(head));
    const Header h = read_header(r);
    return {h.dim, h.count};
}

CachedProvider::CachedProvider(const EmbeddingProvider& inner, EmbeddingCache& cache) : inner_(inner), cache_(cache) {
    if (cache.dim() != inner.descriptor().dim)
        throw DimensionMismatchError("cache dim " + std::to_string(cache.dim()) + " != provider dim " +
                                     std::to_string(inner.descriptor().dim));
}

std::vector<EmbeddingVector> CachedProvider::embed(std::span<const std::string> texts) const {
    std::vector<EmbeddingVector> out(texts.size());
    std::vector<std::string> missing;
    std::vector<std::size_t> missing_at;
    {
        std::lock_guard lock(mutex_);
        for (std::size_t i = 0; i < texts.size(); ++i) {
            if (auto hit = cache_.lookup(texts[i])) {
                out[i] = std::move(*hit);
                ++hits_;
            } else {
                missing.push_back(texts[i]);
                missing_at.push_back(i);
            }
        }
    }
    // a text repeated within one batch is embedded once
    std::vector<std::string> unique;
    std::vector<std::size_t> slot(missing.size());
    {
        std::map<std::string_view, std::size_t> seen;
        for (std::size_t k = 0; k < missing.size(); ++k) {
            auto [it, fresh] = seen.emplace(missing[k], unique.size());
            if (fresh) unique.push_back(missing[k]);
            slot[k] = it->second;
        }
    }
    if (missing.empty()) return out;
    auto fresh = inner_.embed(unique);
    std::lock_guard lock(mutex_);
    for (std::size_t u = 0; u < unique.size(); ++u) cache_.store(unique[u], fresh[u]);
    misses_ += unique.size();
    hits_ += missing.size() - unique.size();
    for (std::size_t k = 0; k < missing.size(); ++k) out[missing_at[k]] = *cache_.lookup(unique[slot[k]]);
    return out;
}

std::size_t CachedProvider::hits() const {
    std::lock_guard lock(mutex_);
    return hits_;
}

std::size_t CachedProvider::misses() const {
    std::lock_guard lock(mutex_);
    return misses_;
}

}  // namespace trialmatch
