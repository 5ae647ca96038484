#include "unetsharp/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

namespace unetsharp {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

enum : std::uint8_t { kF32 = 0, kF64 = 1, kU8 = 2 };

class Writer {
public:
    template <typename V>
    void put(V v)
    {
        bytes(&v, sizeof v);
    }
    void bytes(const void* p, std::size_t n)
    {
        const auto* c = static_cast<const char*>(p);
        buf_.insert(buf_.end(), c, c + n);
    }
    void tensor(const std::string& name, std::uint8_t dtype, const Shape& shape, const void* data, std::size_t n)
    {
        put<std::uint32_t>(static_cast<std::uint32_t>(name.size()));
        bytes(name.data(), name.size());
        put<std::uint8_t>(dtype);
        put<std::uint32_t>(static_cast<std::uint32_t>(shape.size()));
        for (Index d : shape) put<std::uint64_t>(static_cast<std::uint64_t>(d));
        bytes(data, n);
    }
    const std::vector<char>& buffer() const { return buf_; }

private:
    std::vector<char> buf_;
};

class Reader {
public:
    Reader(const std::vector<char>& buf, std::size_t end, std::string origin)
        : buf_(buf)
        , end_(end)
        , origin_(std::move(origin))
    {
    }
    template <typename V>
    V get()
    {
        V v;
        std::memcpy(&v, take(sizeof v), sizeof v);
        return v;
    }
    const char* take(std::size_t n)
    {
        if (n > end_ - pos_) throw DataError("checkpoint " + origin_ + ": truncated");
        const char* p = buf_.data() + pos_;
        pos_ += n;
        return p;
    }
    bool done() const { return pos_ == end_; }

private:
    const std::vector<char>& buf_;
    std::size_t end_;
    std::size_t pos_ = 0;
    std::string origin_;
};

std::uint32_t crc_of(const char* data, std::size_t n)
{
    uLong crc = crc32(0L, Z_NULL, 0);
    // zlib takes uInt lengths; feed large buffers in pieces.
    while (n > 0) {
        const auto piece = static_cast<uInt>(std::min<std::size_t>(n, 1u << 30));
        crc = crc32(crc, reinterpret_cast<const Bytef*>(data), piece);
        data += piece;
        n -= piece;
    }
    return static_cast<std::uint32_t>(crc);
}

} // namespace

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt)
{
    Writer w;
    w.bytes("USHP", 4);
    w.put<std::uint32_t>(kCheckpointVersion);
    w.put<std::uint32_t>(static_cast<std::uint32_t>(ckpt.tensors.size() + 1));
    w.tensor(kMetaTensor, kU8, {static_cast<Index>(ckpt.meta.size())}, ckpt.meta.data(), ckpt.meta.size());
    for (const auto& [name, t] : ckpt.tensors) {
        w.tensor(name, kF32, t.shape(), t.data(), static_cast<std::size_t>(t.size()) * sizeof(float));
    }
    const auto& buf = w.buffer();
    const std::uint32_t crc = crc_of(buf.data(), buf.size());

    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    out.write(reinterpret_cast<const char*>(&crc), sizeof crc);
    if (!out) throw DataError("cannot write checkpoint " + path.string());
}

void save_checkpoint(const std::filesystem::path& path, const ParamStore<float>& store, const std::string& meta)
{
    Checkpoint c;
    c.meta = meta;
    for (const auto& [name, e] : store.entries()) c.tensors.emplace(name, e.value);
    save_checkpoint(path, c);
}

Checkpoint load_checkpoint(const std::filesystem::path& path)
{
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint " + path.string());
    std::vector<char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    const std::string origin = path.string();
    if (buf.size() < 16) throw DataError("checkpoint " + origin + ": truncated");
    std::uint32_t stored;
    std::memcpy(&stored, buf.data() + buf.size() - 4, 4);
    if (crc_of(buf.data(), buf.size() - 4) != stored) throw DataError("checkpoint " + origin + ": CRC mismatch");

    Reader r(buf, buf.size() - 4, origin);
    if (std::memcmp(r.take(4), "USHP", 4) != 0) throw DataError("checkpoint " + origin + ": bad magic");
    const auto version = r.get<std::uint32_t>();
    if (version != kCheckpointVersion) {
        throw DataError("checkpoint " + origin + ": unsupported version " + std::to_string(version));
    }
    const auto count = r.get<std::uint32_t>();
    Checkpoint c;
    for (std::uint32_t i = 0; i < count; ++i) {
        const auto len = r.get<std::uint32_t>();
        std::string name(r.take(len), len);
        const auto dtype = r.get<std::uint8_t>();
        const auto rank = r.get<std::uint32_t>();
        Shape shape;
        for (std::uint32_t d = 0; d < rank; ++d) shape.push_back(static_cast<Index>(r.get<std::uint64_t>()));
        const auto n = static_cast<std::size_t>(numel(shape));
        if (dtype == kU8) {
            const char* p = r.take(n);
            if (name == kMetaTensor) c.meta.assign(p, n);
            continue;
        }
        Tensor<float> t(shape);
        if (dtype == kF32) {
            std::memcpy(t.data(), r.take(n * sizeof(float)), n * sizeof(float));
        } else if (dtype == kF64) {
            const char* p = r.take(n * sizeof(double));
            for (std::size_t k = 0; k < n; ++k) {
                double v;
                std::memcpy(&v, p + k * sizeof v, sizeof v);
                t[static_cast<Index>(k)] = static_cast<float>(v);
            }
        } else {
            throw DataError("checkpoint " + origin + ": tensor " + name + " has unknown dtype " + std::to_string(dtype));
        }
        if (!c.tensors.emplace(name, std::move(t)).second) {
            throw DataError("checkpoint " + origin + ": duplicate tensor " + name);
        }
    }
    if (!r.done()) throw DataError("checkpoint " + origin + ": trailing bytes");
    return c;
}

void restore(ParamStore<float>& store, const Checkpoint& ckpt)
{
    for (const auto& [name, e] : store.entries()) {
        auto it = ckpt.tensors.find(name);
        if (it == ckpt.tensors.end()) throw DataError("checkpoint lacks tensor " + name);
        if (it->second.shape() != e.value.shape()) {
            throw DataError("checkpoint tensor " + name + " has shape " + to_string(it->second.shape()) + ", model expects "
                            + to_string(e.value.shape()));
        }
    }
    for (const auto& [name, t] : ckpt.tensors) {
        if (!store.contains(name)) throw DataError("checkpoint has unexpected tensor " + name);
    }
    for (auto& [name, e] : store.entries()) {
        e.value = ckpt.tensors.at(name);
        e.grad = Tensor<float>();
    }
}

} // namespace unetsharp
