#pragma once

// Output writers. CSV is RFC-4180 in the record region (CRLF line ends, '.'
// decimal, 17-significant-digit doubles so values round-trip exactly),
// preceded by three '#'-prefixed provenance lines carrying the full spec,
// the seed list, and the build id. JSON files embed the same provenance
// natively. Re-running the same spec with the same build yields
// byte-identical files.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "nthlab/errors.hpp"
#include "nthlab/experiment_spec.hpp"
#include "nthlab/kernel.hpp"
#include "nthlab/version.hpp"

namespace nthlab {

inline std::string g17(double x) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", x);
    return buf;
}

inline json provenance(const ExperimentSpec& spec) {
    json meta;
    meta["build"] = build_id();
    meta["base_seed"] = spec.base_seed;
    meta["seeds"] = spec.seeds;
    meta["spec"] = spec.raw;
    return meta;
}

class CsvWriter {
public:
    CsvWriter(const std::filesystem::path& path, const ExperimentSpec& spec,
              std::vector<std::string> columns)
        : out_(path, std::ios::binary), columns_(std::move(columns)) {
        if (!out_) throw ConfigError("cannot open output file '" + path.string() + "'");
        out_ << "# spec: " << spec.raw.dump() << "\r\n";
        json seeds = spec.seeds;
        out_ << "# seeds: base=" << spec.base_seed << " list=" << seeds.dump() << "\r\n";
        out_ << "# build: " << build_id() << "\r\n";
        write_record(columns_);
    }

    void row(const std::vector<std::string>& fields) {
        if (fields.size() != columns_.size())
            throw ConfigError("csv row has " + std::to_string(fields.size()) +
                              " fields, header has " + std::to_string(columns_.size()));
        write_record(fields);
    }

private:
    static std::string escape(const std::string& f) {
        if (f.find_first_of(",\"\r\n") == std::string::npos) return f;
        std::string q = "\"";
        for (char c : f) {
            if (c == '"') q += "\"\"";
            else q += c;
        }
        q += "\"";
        return q;
    }

    void write_record(const std::vector<std::string>& fields) {
        for (std::size_t i = 0; i < fields.size(); ++i) {
            if (i) out_ << ',';
            out_ << escape(fields[i]);
        }
        out_ << "\r\n";
    }

    std::ofstream out_;
    std::vector<std::string> columns_;
};

inline void write_json(const std::filesystem::path& path, const json& doc) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("cannot open output file '" + path.string() + "'");
    out << doc.dump(2) << "\n";
}

inline json gram_to_json(const GramMatrix& g) {
    json rows = json::array();
    for (std::size_t i = 0; i < g.n; ++i) {
        json row = json::array();
        for (std::size_t j = 0; j < g.n; ++j) row.push_back(g(i, j));
        rows.push_back(row);
    }
    return rows;
}

} // namespace nthlab
