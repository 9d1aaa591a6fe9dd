#include "mcmkd/archive.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>

#include "mcmkd/errors.hpp"

namespace mcmkd {

namespace {

void append_u16(std::vector<std::uint8_t>& out, std::uint16_t v) {
    out.push_back(static_cast<std::uint8_t>(v & 0xff));
    out.push_back(static_cast<std::uint8_t>(v >> 8));
}

void append_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void append_u64(std::vector<std::uint8_t>& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) {
        out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
    }
}

void append_f32(std::vector<std::uint8_t>& out, float v) {
    append_u32(out, std::bit_cast<std::uint32_t>(v));
}

void append_f64(std::vector<std::uint8_t>& out, double v) {
    append_u64(out, std::bit_cast<std::uint64_t>(v));
}

void write_file(const std::string& path, const std::vector<std::uint8_t>& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) {
        throw DataFormatError("cannot open for writing: " + path);
    }
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out) {
        throw DataFormatError("write failed: " + path);
    }
}

/// Sequential little-endian reader that reports the byte offset of any failure.
class ByteReader {
public:
    ByteReader(std::string path, std::vector<std::uint8_t> bytes)
        : path_(std::move(path)), bytes_(std::move(bytes)) {}

    std::size_t offset() const { return offset_; }
    std::size_t size() const { return bytes_.size(); }

    [[noreturn]] void fail(const std::string& what) const {
        throw DataFormatError(path_ + ": " + what + " at byte " + std::to_string(offset_) +
                              " (file length " + std::to_string(bytes_.size()) + ")");
    }

    void expect_magic(const char (&magic)[5]) {
        need(4, "magic");
        if (!std::equal(magic, magic + 4, bytes_.begin() + static_cast<std::ptrdiff_t>(offset_))) {
            fail(std::string("bad magic, expected \"") + magic + "\"");
        }
        offset_ += 4;
    }

    std::uint16_t read_u16(const char* what) {
        need(2, what);
        const std::uint16_t v = static_cast<std::uint16_t>(bytes_[offset_]) |
                                static_cast<std::uint16_t>(bytes_[offset_ + 1]) << 8;
        offset_ += 2;
        return v;
    }

    std::uint32_t read_u32(const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 3; i >= 0; --i) {
            v = (v << 8) | bytes_[offset_ + static_cast<std::size_t>(i)];
        }
        offset_ += 4;
        return v;
    }

    std::uint64_t read_u64(const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 7; i >= 0; --i) {
            v = (v << 8) | bytes_[offset_ + static_cast<std::size_t>(i)];
        }
        offset_ += 8;
        return v;
    }

    float read_f32(const char* what) { return std::bit_cast<float>(read_u32(what)); }
    double read_f64(const char* what) { return std::bit_cast<double>(read_u64(what)); }

    std::string read_string(std::size_t len, const char* what) {
        need(len, what);
        std::string s(bytes_.begin() + static_cast<std::ptrdiff_t>(offset_),
                      bytes_.begin() + static_cast<std::ptrdiff_t>(offset_ + len));
        offset_ += len;
        return s;
    }

    void expect_end() {
        if (offset_ != bytes_.size()) {
            fail("trailing bytes");
        }
    }

private:
    void need(std::size_t n, const char* what) {
        if (offset_ + n > bytes_.size()) {
            fail(std::string("truncated while reading ") + what);
        }
    }

    std::string path_;
    std::vector<std::uint8_t> bytes_;
    std::size_t offset_ = 0;
};

ByteReader open_reader(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DataFormatError("cannot open: " + path);
    }
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return ByteReader(path, std::move(bytes));
}

}  // namespace

// ---- feature archive -----------------------------------------------------------

void write_feature_archive(const std::string& path, const FeatureArchive& archive) {
    const std::size_t row_count = static_cast<std::size_t>(archive.s) * archive.s;
    const std::size_t values_per_seq = row_count * archive.dim;
    for (const FeatureSequence& seq : archive.sequences) {
        if (seq.values.size() != values_per_seq) {
            throw DataFormatError(path + ": sequence at (" + std::to_string(seq.origin_row) + "," +
                                  std::to_string(seq.origin_col) + ") has " +
                                  std::to_string(seq.values.size()) + " values, expected " +
                                  std::to_string(values_per_seq));
        }
    }
    std::vector<std::uint8_t> bytes;
    bytes.reserve(12 + archive.sequences.size() * (8 + values_per_seq * 4));
    bytes.insert(bytes.end(), {'M', 'C', 'F', 'A'});
    append_u16(bytes, kFeatureArchiveVersion);
    append_u32(bytes, static_cast<std::uint32_t>(archive.sequences.size()));
    append_u16(bytes, archive.s);
    append_u16(bytes, archive.dim);
    for (const FeatureSequence& seq : archive.sequences) {
        append_u32(bytes, seq.origin_row);
        append_u32(bytes, seq.origin_col);
        for (const float v : seq.values) {
            append_f32(bytes, v);
        }
    }
    write_file(path, bytes);
}

FeatureArchive read_feature_archive(const std::string& path) {
    ByteReader reader = open_reader(path);
    reader.expect_magic("MCFA");
    const std::uint16_t version = reader.read_u16("version");
    if (version != kFeatureArchiveVersion) {
        reader.fail("unsupported version " + std::to_string(version));
    }
    const std::uint32_t n_sequences = reader.read_u32("sequence count");
    FeatureArchive archive;
    archive.s = reader.read_u16("window side");
    archive.dim = reader.read_u16("vector dim");
    if (archive.s == 0 || archive.dim == 0) {
        reader.fail("zero window side or vector dim");
    }
    const std::size_t values_per_seq =
        static_cast<std::size_t>(archive.s) * archive.s * archive.dim;
    const std::size_t expected = 14 + static_cast<std::size_t>(n_sequences) * (8 + values_per_seq * 4);
    if (reader.size() != expected) {
        reader.fail("file length should be " + std::to_string(expected));
    }
    archive.sequences.resize(n_sequences);
    for (FeatureSequence& seq : archive.sequences) {
        seq.origin_row = reader.read_u32("origin row");
        seq.origin_col = reader.read_u32("origin col");
        seq.values.resize(values_per_seq);
        for (float& v : seq.values) {
            v = reader.read_f32("feature value");
        }
    }
    reader.expect_end();
    return archive;
}

// ---- checkpoints ----------------------------------------------------------------

void write_checkpoint(const std::string& path, const NamedParams& params) {
    std::vector<std::uint8_t> bytes;
    bytes.insert(bytes.end(), {'M', 'C', 'K', 'P'});
    append_u16(bytes, kCheckpointVersion);
    append_u32(bytes, static_cast<std::uint32_t>(params.size()));
    for (const auto& [name, tensor] : params) {
        append_u16(bytes, static_cast<std::uint16_t>(name.size()));
        bytes.insert(bytes.end(), name.begin(), name.end());
        append_u16(bytes, static_cast<std::uint16_t>(tensor.ndim()));
        for (const std::size_t d : tensor.shape()) {
            append_u32(bytes, static_cast<std::uint32_t>(d));
        }
        for (const double v : tensor.data()) {
            append_f64(bytes, v);
        }
    }
    write_file(path, bytes);
}

NamedParams read_checkpoint(const std::string& path) {
    ByteReader reader = open_reader(path);
    reader.expect_magic("MCKP");
    const std::uint16_t version = reader.read_u16("version");
    if (version != kCheckpointVersion) {
        reader.fail("unsupported version " + std::to_string(version));
    }
    const std::uint32_t count = reader.read_u32("parameter count");
    NamedParams params;
    params.reserve(count);
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint16_t name_len = reader.read_u16("name length");
        const std::string name = reader.read_string(name_len, "name");
        const std::uint16_t ndim = reader.read_u16("rank");
        Shape shape(ndim);
        std::size_t numel = 1;
        for (std::uint16_t d = 0; d < ndim; ++d) {
            shape[d] = reader.read_u32("dimension");
            numel *= shape[d];
        }
        if (ndim == 0 || numel == 0) {
            reader.fail("parameter \"" + name + "\" has an empty shape");
        }
        std::vector<double> data(numel);
        for (double& v : data) {
            v = reader.read_f64("parameter value");
        }
        params.emplace_back(name, Tensor::from_data(std::move(shape), std::move(data)));
    }
    reader.expect_end();
    return params;
}

void load_checkpoint_into(const std::string& path, const NamedParams& live) {
    const NamedParams stored = read_checkpoint(path);
    std::map<std::string, const Tensor*> by_name;
    for (const auto& [name, tensor] : stored) {
        if (!by_name.emplace(name, &tensor).second) {
            throw DataFormatError(path + ": duplicate parameter \"" + name + "\"");
        }
    }
    for (const auto& [name, tensor] : live) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw DataFormatError(path + ": missing parameter \"" + name + "\"");
        }
        if (it->second->shape() != tensor.shape()) {
            throw DataFormatError(path + ": parameter \"" + name + "\" has shape " +
                                  shape_str(it->second->shape()) + ", model expects " +
                                  shape_str(tensor.shape()));
        }
        Tensor dst = tensor;
        std::copy(it->second->data().begin(), it->second->data().end(),
                  dst.mutable_data().begin());
        by_name.erase(it);
    }
    if (!by_name.empty()) {
        throw DataFormatError(path + ": unexpected parameter \"" + by_name.begin()->first + "\"");
    }
}

// ---- images ---------------------------------------------------------------------

void write_ppm(const std::string& path, const SyntheticSlide& slide) {
    if (slide.channels != 3) {
        throw DataFormatError(path + ": PPM export needs 3 channels, slide has " +
                              std::to_string(slide.channels));
    }
    const std::size_t h = slide.height(), w = slide.width();
    std::string header = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.reserve(bytes.size() + h * w * 3);
    for (std::size_t y = 0; y < h; ++y) {
        for (std::size_t x = 0; x < w; ++x) {
            for (std::size_t ch = 0; ch < 3; ++ch) {
                const double v = slide.pixels[(ch * h + y) * w + x];
                bytes.push_back(
                    static_cast<std::uint8_t>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
            }
        }
    }
    write_file(path, bytes);
}

void write_pgm(const std::string& path, std::size_t rows, std::size_t cols,
               std::span<const double> values) {
    if (values.size() != rows * cols) {
        throw DataFormatError(path + ": PGM value count " + std::to_string(values.size()) +
                              " does not match " + std::to_string(rows) + "x" +
                              std::to_string(cols));
    }
    std::string header = "P5\n" + std::to_string(cols) + " " + std::to_string(rows) + "\n255\n";
    std::vector<std::uint8_t> bytes(header.begin(), header.end());
    bytes.reserve(bytes.size() + values.size());
    for (const double v : values) {
        const double mapped = (std::clamp(v, -1.0, 1.0) + 1.0) * 0.5 * 255.0;
        bytes.push_back(static_cast<std::uint8_t>(std::lround(mapped)));
    }
    write_file(path, bytes);
}

std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace mcmkd
