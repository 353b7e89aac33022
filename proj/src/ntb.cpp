#include "crowdkit/ntb.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>

namespace crowdkit {
namespace {

constexpr char kMagic[4] = {'N', 'T', 'B', '1'};
constexpr std::uint32_t kMaxName = 4096;
constexpr std::uint32_t kMaxRank = 8;
constexpr std::uint64_t kMaxElems = std::uint64_t{1} << 32;

class Reader {
public:
    Reader(std::ifstream& in, const std::string& path) : in_(in), path_(path) {}

    std::uint64_t offset() const { return offset_; }

    void bytes(void* dst, std::size_t n, const char* what) {
        in_.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw FormatError(path_ + ": truncated " + what + " at offset " + std::to_string(offset_), offset_);
        offset_ += n;
    }

    std::uint32_t u32(const char* what) {
        unsigned char b[4];
        bytes(b, 4, what);
        return static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
               (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    }

private:
    std::ifstream& in_;
    std::string path_;
    std::uint64_t offset_ = 0;
};

void put_u32(std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v & 0xff),
                          static_cast<unsigned char>((v >> 8) & 0xff),
                          static_cast<unsigned char>((v >> 16) & 0xff),
                          static_cast<unsigned char>((v >> 24) & 0xff)};
    out.write(reinterpret_cast<const char*>(b), 4);
}

}  // namespace

void write_ntb(const std::string& path, const NamedTensors& tensors) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError("cannot open for writing: " + path, 0);
    out.write(kMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(tensors.size()));
    for (const auto& [name, tensor] : tensors) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
        for (int d : tensor.shape()) put_u32(out, static_cast<std::uint32_t>(d));
        out.write(reinterpret_cast<const char*>(tensor.data()),
                  static_cast<std::streamsize>(tensor.numel() * sizeof(double)));
    }
    if (!out) throw FormatError("write failed: " + path, 0);
}

NamedTensors read_ntb(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw FormatError("cannot open: " + path, 0);
    Reader r(in, path);

    char magic[4];
    r.bytes(magic, 4, "magic");
    if (std::memcmp(magic, kMagic, 4) != 0)
        throw FormatError(path + ": bad magic at offset 0", 0);

    const std::uint32_t count = r.u32("tensor count");
    NamedTensors tensors;
    tensors.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint64_t name_off = r.offset();
        const std::uint32_t name_len = r.u32("name length");
        if (name_len > kMaxName)
            throw FormatError(path + ": implausible name length " + std::to_string(name_len) +
                              " at offset " + std::to_string(name_off), name_off);
        std::string name(name_len, '\0');
        if (name_len) r.bytes(name.data(), name_len, "name");

        const std::uint64_t rank_off = r.offset();
        const std::uint32_t rank = r.u32("rank");
        if (rank > kMaxRank)
            throw FormatError(path + ": implausible rank " + std::to_string(rank) +
                              " at offset " + std::to_string(rank_off), rank_off);
        std::vector<int> shape(rank);
        std::uint64_t numel = 1;
        for (std::uint32_t d = 0; d < rank; ++d) {
            const std::uint64_t dim_off = r.offset();
            const std::uint32_t dim = r.u32("dimension");
            numel *= dim;
            if (numel > kMaxElems)
                throw FormatError(path + ": implausible tensor size at offset " + std::to_string(dim_off), dim_off);
            shape[d] = static_cast<int>(dim);
        }
        std::vector<double> values(numel);
        if (numel) r.bytes(values.data(), numel * sizeof(double), "tensor payload");
        tensors.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
    }
    return tensors;
}

}  // namespace crowdkit
