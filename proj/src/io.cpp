#include "trc/io.hpp"

#include <charconv>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "trc/error.hpp"

namespace trc {

namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

std::string slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(Errc::FileNotFound, path, "cannot open file");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

bool to_double(const std::string& s, double& out) {
    const char* b = s.data();
    const char* e = b + s.size();
    if (b != e && *b == '+') ++b;
    auto [ptr, ec] = std::from_chars(b, e, out);
    return ec == std::errc() && ptr == e && b != e;
}

std::vector<std::string> split_entries(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',' || c == ' ' || c == '\t') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

}  // namespace

ConfigMap parse_config(const std::string& text, const std::string& source) {
    ConfigMap map;
    std::istringstream in(text);
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        const auto hash = raw.find('#');
        const std::string s = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
        if (s.empty()) continue;
        const auto eq = s.find('=');
        if (eq == std::string::npos)
            throw Error(Errc::ParseError, source + ":" + std::to_string(line), "expected key = value");
        const std::string key = trim(s.substr(0, eq));
        const std::string value = trim(s.substr(eq + 1));
        if (key.empty()) throw Error(Errc::ParseError, source + ":" + std::to_string(line), "empty key");
        if (map.count(key))
            throw Error(Errc::ParseError, source + ":" + std::to_string(line), "duplicate key '" + key + "'");
        map[key] = ConfigEntry{value, line};
    }
    return map;
}

ConfigMap read_config(const std::string& path) {
    return parse_config(slurp(path), path);
}

double parse_real(const std::string& key, const std::string& text) {
    double v = 0.0;
    if (!to_double(trim(text), v) || !std::isfinite(v))
        throw Error(Errc::InvalidSpec, key, "expected a finite real, got '" + text + "'");
    return v;
}

long long parse_integer(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    long long v = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
        throw Error(Errc::InvalidSpec, key, "expected an integer, got '" + text + "'");
    return v;
}

unsigned long long parse_u64(const std::string& key, const std::string& text) {
    const std::string t = trim(text);
    unsigned long long v = 0;
    auto [ptr, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || ptr != t.data() + t.size() || t.empty())
        throw Error(Errc::InvalidSpec, key, "expected an unsigned 64-bit integer, got '" + text + "'");
    return v;
}

Vec parse_vector(const std::string& key, const std::string& text) {
    if (text.find(';') != std::string::npos) throw Error(Errc::InvalidSpec, key, "expected a vector, not a matrix");
    const auto parts = split_entries(text);
    Vec v(static_cast<Index>(parts.size()));
    for (std::size_t i = 0; i < parts.size(); ++i) v(static_cast<Index>(i)) = parse_real(key, parts[i]);
    return v;
}

Mat parse_matrix(const std::string& key, const std::string& text) {
    std::vector<std::vector<double>> rows;
    std::string row;
    std::istringstream in(text);
    while (std::getline(in, row, ';')) {
        if (trim(row).empty()) continue;
        std::vector<double> r;
        for (const auto& e : split_entries(row)) r.push_back(parse_real(key, e));
        rows.push_back(std::move(r));
    }
    if (rows.empty()) return Mat(0, 0);
    const std::size_t cols = rows.front().size();
    Mat m(static_cast<Index>(rows.size()), static_cast<Index>(cols));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i].size() != cols) throw Error(Errc::InvalidSpec, key, "ragged matrix rows");
        for (std::size_t j = 0; j < cols; ++j) m(static_cast<Index>(i), static_cast<Index>(j)) = rows[i][j];
    }
    return m;
}

std::vector<std::string> parse_name_list(const std::string& key, const std::string& text) {
    std::vector<std::string> out;
    std::string cur;
    std::istringstream in(text);
    while (std::getline(in, cur, ',')) {
        const std::string t = trim(cur);
        if (t.empty()) throw Error(Errc::InvalidSpec, key, "empty name in list");
        out.push_back(t);
    }
    return out;
}

CsvTable parse_csv(const std::string& text, const std::string& source) {
    CsvTable t;
    t.source = source;
    std::vector<std::string> fields;
    std::string cur;
    bool quoted = false;
    bool any = false;
    std::size_t line = 1;
    const auto end_row = [&] {
        fields.push_back(trim(cur));
        cur.clear();
        const bool blank = fields.size() == 1 && fields[0].empty();
        if (!blank) {
            if (t.header.empty()) {
                t.header = fields;
            } else {
                if (fields.size() != t.header.size()) {
                    std::ostringstream os;
                    os << "row " << t.rows.size() + 1 << " has " << fields.size() << " fields, header has "
                       << t.header.size();
                    throw Error(Errc::ParseError, source + ":" + std::to_string(line), os.str());
                }
                t.rows.push_back(fields);
            }
        }
        fields.clear();
        any = false;
    };
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    cur += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                if (c == '\n') ++line;
                cur += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            fields.push_back(trim(cur));
            cur.clear();
            any = true;
        } else if (c == '\n') {
            end_row();
            ++line;
        } else if (c != '\r') {
            cur += c;
            any = true;
        }
    }
    if (quoted) throw Error(Errc::ParseError, source, "unterminated quoted field");
    if (any || !cur.empty()) end_row();
    if (t.header.empty()) throw Error(Errc::ParseError, source, "missing header row");
    // strip a UTF-8 byte order mark
    if (t.header[0].rfind("\xEF\xBB\xBF", 0) == 0) t.header[0] = t.header[0].substr(3);
    return t;
}

CsvTable read_csv(const std::string& path) {
    return parse_csv(slurp(path), path);
}

ColumnBlock select_columns(const CsvTable& table, const std::vector<ColumnRole>& columns) {
    std::vector<std::size_t> idx;
    for (const auto& c : columns) {
        std::size_t found = table.header.size();
        for (std::size_t j = 0; j < table.header.size(); ++j)
            if (table.header[j] == c.name) found = j;
        if (found == table.header.size())
            throw Error(Errc::MissingColumn, c.role, "column '" + c.name + "' not found in " + table.source);
        idx.push_back(found);
    }
    ColumnBlock out;
    std::vector<std::size_t> keep;
    for (std::size_t r = 0; r < table.rows.size(); ++r) {
        bool complete = true;
        for (auto j : idx)
            if (table.rows[r][j].empty()) complete = false;
        if (complete)
            keep.push_back(r);
        else
            ++out.dropped;
    }
    out.data.resize(static_cast<Index>(keep.size()), static_cast<Index>(idx.size()));
    for (std::size_t k = 0; k < keep.size(); ++k) {
        for (std::size_t c = 0; c < idx.size(); ++c) {
            const std::string& f = table.rows[keep[k]][idx[c]];
            double v = 0.0;
            if (!to_double(f, v) || !std::isfinite(v)) {
                std::ostringstream os;
                os << "data row " << keep[k] + 1 << ", column '" << table.header[idx[c]] << "': '" << f
                   << "' is not a finite number";
                throw Error(Errc::ParseError, table.source, os.str());
            }
            out.data(static_cast<Index>(k), static_cast<Index>(c)) = v;
        }
    }
    return out;
}

std::string format_real(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

void write_csv(const std::string& path, const std::vector<std::string>& header, const Mat& data) {
    if (static_cast<Index>(header.size()) != data.cols())
        throw Error(Errc::DimensionMismatch, path, "header and data differ in columns");
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::FileNotFound, path, "cannot open for writing");
    for (std::size_t j = 0; j < header.size(); ++j) out << (j ? "," : "") << header[j];
    out << '\n';
    for (Index i = 0; i < data.rows(); ++i) {
        for (Index j = 0; j < data.cols(); ++j) out << (j ? "," : "") << format_real(data(i, j));
        out << '\n';
    }
}

}  // namespace trc
