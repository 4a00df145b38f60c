#pragma once

#include <Eigen/Dense>
#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "irnlm/common.hpp"

namespace irnlm::io {

using json = nlohmann::ordered_json;

static_assert(std::endian::native == std::endian::little,
              "file formats are little-endian; big-endian hosts unsupported");

inline constexpr char kMagic[6] = {'I', 'R', 'N', 'L', 'M', '1'};

namespace detail {

inline void put_u32(std::ostream& os, std::uint32_t v) {
    char buf[4];
    std::memcpy(buf, &v, 4);
    os.write(buf, 4);
}

inline std::uint32_t get_u32(std::istream& is, const std::string& what) {
    char buf[4];
    if (!is.read(buf, 4)) throw DataError("truncated " + what);
    std::uint32_t v;
    std::memcpy(&v, buf, 4);
    return v;
}

inline void check_magic(std::istream& is, const std::string& path) {
    char buf[6];
    if (!is.read(buf, 6) || std::memcmp(buf, kMagic, 6) != 0)
        throw DataError(path + ": bad magic, not an IRNLM1 file");
}

}  // namespace detail

// Binary matrix: magic, u32 rows, u32 cols, then rows*cols f32
// little-endian in row-major order.
inline void write_matrix(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os.write(kMagic, 6);
    detail::put_u32(os, static_cast<std::uint32_t>(m.rows()));
    detail::put_u32(os, static_cast<std::uint32_t>(m.cols()));
    std::vector<float> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            row[static_cast<std::size_t>(j)] = static_cast<float>(m(i, j));
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!os) throw DataError("write failed: " + path.string());
}

inline Eigen::MatrixXd read_matrix(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path.string());
    detail::check_magic(is, path.string());
    const std::uint32_t rows = detail::get_u32(is, path.string());
    const std::uint32_t cols = detail::get_u32(is, path.string());
    Eigen::MatrixXd m(rows, cols);
    std::vector<float> row(cols);
    for (std::uint32_t i = 0; i < rows; ++i) {
        if (!is.read(reinterpret_cast<char*>(row.data()),
                     static_cast<std::streamsize>(cols * sizeof(float))))
            throw DataError("truncated matrix payload: " + path.string());
        for (std::uint32_t j = 0; j < cols; ++j) m(i, j) = row[j];
    }
    return m;
}

// Raw f32 payload without header, for BOLD runs whose shape lives in the
// JSON sidecar.
inline void write_raw_f32(const std::filesystem::path& path, const Eigen::MatrixXd& m) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    std::vector<float> row(static_cast<std::size_t>(m.cols()));
    for (Eigen::Index i = 0; i < m.rows(); ++i) {
        for (Eigen::Index j = 0; j < m.cols(); ++j)
            row[static_cast<std::size_t>(j)] = static_cast<float>(m(i, j));
        os.write(reinterpret_cast<const char*>(row.data()),
                 static_cast<std::streamsize>(row.size() * sizeof(float)));
    }
    if (!os) throw DataError("write failed: " + path.string());
}

inline Eigen::MatrixXd read_raw_f32(const std::filesystem::path& path,
                                    Eigen::Index rows, Eigen::Index cols) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path.string());
    Eigen::MatrixXd m(rows, cols);
    std::vector<float> row(static_cast<std::size_t>(cols));
    for (Eigen::Index i = 0; i < rows; ++i) {
        if (!is.read(reinterpret_cast<char*>(row.data()),
                     static_cast<std::streamsize>(row.size() * sizeof(float))))
            throw DataError("truncated f32 payload: " + path.string());
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = row[static_cast<std::size_t>(j)];
    }
    is.peek();
    if (!is.eof()) throw DataError("trailing bytes in f32 payload: " + path.string());
    return m;
}

// Checkpoint container: magic, u32 header length, JSON header, then the
// tensors named in the header, each as f32 little-endian row-major.
struct NamedTensor {
    std::string name;
    Eigen::MatrixXd value;
};

inline void write_checkpoint(const std::filesystem::path& path, const json& header,
                             const std::vector<NamedTensor>& tensors) {
    json hdr = header;
    json tensor_list = json::array();
    for (const auto& t : tensors)
        tensor_list.push_back({{"name", t.name},
                               {"rows", t.value.rows()},
                               {"cols", t.value.cols()}});
    hdr["tensors"] = tensor_list;
    const std::string text = hdr.dump();
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os.write(kMagic, 6);
    detail::put_u32(os, static_cast<std::uint32_t>(text.size()));
    os.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& t : tensors) {
        std::vector<float> row(static_cast<std::size_t>(t.value.cols()));
        for (Eigen::Index i = 0; i < t.value.rows(); ++i) {
            for (Eigen::Index j = 0; j < t.value.cols(); ++j)
                row[static_cast<std::size_t>(j)] = static_cast<float>(t.value(i, j));
            os.write(reinterpret_cast<const char*>(row.data()),
                     static_cast<std::streamsize>(row.size() * sizeof(float)));
        }
    }
    if (!os) throw DataError("write failed: " + path.string());
}

inline json read_checkpoint(const std::filesystem::path& path,
                            std::vector<NamedTensor>& tensors_out) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path.string());
    detail::check_magic(is, path.string());
    const std::uint32_t len = detail::get_u32(is, path.string());
    std::string text(len, '\0');
    if (!is.read(text.data(), len)) throw DataError("truncated header: " + path.string());
    json hdr;
    try {
        hdr = json::parse(text);
    } catch (const json::parse_error& e) {
        throw DataError(path.string() + ": header is not valid JSON: " + e.what());
    }
    if (!hdr.contains("tensors") || !hdr["tensors"].is_array())
        throw DataError(path.string() + ": header lacks tensor table");
    tensors_out.clear();
    for (const auto& entry : hdr["tensors"]) {
        NamedTensor t;
        t.name = entry.at("name").get<std::string>();
        const auto rows = entry.at("rows").get<Eigen::Index>();
        const auto cols = entry.at("cols").get<Eigen::Index>();
        t.value.resize(rows, cols);
        std::vector<float> row(static_cast<std::size_t>(cols));
        for (Eigen::Index i = 0; i < rows; ++i) {
            if (!is.read(reinterpret_cast<char*>(row.data()),
                         static_cast<std::streamsize>(row.size() * sizeof(float))))
                throw DataError(path.string() + ": truncated tensor " + t.name);
            for (Eigen::Index j = 0; j < cols; ++j)
                t.value(i, j) = row[static_cast<std::size_t>(j)];
        }
        tensors_out.push_back(std::move(t));
    }
    return hdr;
}

inline void write_json(const std::filesystem::path& path, const json& j) {
    std::ofstream os(path);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os << j.dump(2) << '\n';
    if (!os) throw DataError("write failed: " + path.string());
}

inline json read_json(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open: " + path.string());
    try {
        return json::parse(is);
    } catch (const json::parse_error& e) {
        throw DataError(path.string() + ": invalid JSON: " + e.what());
    }
}

inline std::string read_text(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open: " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os << text;
    if (!os) throw DataError("write failed: " + path.string());
}

// Lines of tab-separated fields; '#' starts a comment line; blank lines
// skipped. Returns fields with 1-based source line numbers for error
// reporting.
struct TsvRow {
    std::size_t line_no;
    std::vector<std::string> fields;
};

inline std::vector<TsvRow> read_tsv(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw DataError("cannot open: " + path.string());
    std::vector<TsvRow> rows;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        TsvRow row;
        row.line_no = line_no;
        std::size_t start = 0;
        while (true) {
            const std::size_t tab = line.find('\t', start);
            if (tab == std::string::npos) {
                row.fields.push_back(line.substr(start));
                break;
            }
            row.fields.push_back(line.substr(start, tab - start));
            start = tab + 1;
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

// 8-bit binary PGM, used by the report stage for quick-look slice images.
inline void write_pgm(const std::filesystem::path& path, int width, int height,
                      const std::vector<std::uint8_t>& pixels) {
    if (static_cast<std::size_t>(width) * static_cast<std::size_t>(height) != pixels.size())
        throw ConfigError("pgm dimensions do not match pixel count");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw DataError("cannot open for writing: " + path.string());
    os << "P5\n" << width << ' ' << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels.data()),
             static_cast<std::streamsize>(pixels.size()));
    if (!os) throw DataError("write failed: " + path.string());
}

}  // namespace irnlm::io
