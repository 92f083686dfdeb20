#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "trc/linalg.hpp"

namespace trc {

// Flat "key = value" configuration. '#' starts a comment; blank lines are
// ignored; a key may appear once.
struct ConfigEntry {
    std::string value;
    int line = 0;
};
using ConfigMap = std::map<std::string, ConfigEntry>;

ConfigMap parse_config(const std::string& text, const std::string& source);
ConfigMap read_config(const std::string& path);

// Typed field parsers; failures raise InvalidSpec naming the key.
double parse_real(const std::string& key, const std::string& text);
long long parse_integer(const std::string& key, const std::string& text);
unsigned long long parse_u64(const std::string& key, const std::string& text);
Vec parse_vector(const std::string& key, const std::string& text);
// rows separated by ';', entries by ',' or whitespace
Mat parse_matrix(const std::string& key, const std::string& text);
std::vector<std::string> parse_name_list(const std::string& key, const std::string& text);

struct CsvTable {
    std::string source;
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;
};

CsvTable read_csv(const std::string& path);
CsvTable parse_csv(const std::string& text, const std::string& source);

// One named column with the role it plays, used in MissingColumn messages.
struct ColumnRole {
    std::string name;
    std::string role;
};

struct ColumnBlock {
    Mat data;            // complete rows only, columns in request order
    Index dropped = 0;   // rows removed for an empty field
};

ColumnBlock select_columns(const CsvTable& table, const std::vector<ColumnRole>& columns);

std::string format_real(double v);  // 17 significant digits
void write_csv(const std::string& path, const std::vector<std::string>& header, const Mat& data);

}  // namespace trc
