#include "sblab/checkpoint.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

namespace sblab {

namespace {
constexpr const char* kHeader = "SBCKPT v1";
}

void write_checkpoint(const std::string& path, std::span<const Parameter* const> params) {
    for (const Parameter* p : params)
        if (!p->tensor.all_finite())
            throw NumericError("checkpoint: parameter '" + p->name + "' contains non-finite values");
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw Error("cannot write checkpoint file " + path);
    out << kHeader << '\n';
    for (const Parameter* p : params) {
        out << p->name;
        for (int d : p->tensor.shape) out << ' ' << d;
        out << '\n';
        const auto& data = p->tensor.data;
        for (size_t i = 0; i < data.size(); ++i) {
            if (i) out << ' ';
            out << fmt_g17(data[i]);
        }
        out << '\n';
    }
    if (!out) throw Error("short write to checkpoint file " + path);
}

std::vector<CheckpointRecord> read_checkpoint(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataFormatError("cannot open checkpoint file " + path);
    std::string header;
    if (!std::getline(in, header) || header != kHeader)
        throw DataFormatError("bad header in " + path + " at offset 0: expected 'SBCKPT v1'");
    std::vector<CheckpointRecord> records;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::istringstream hs(line);
        CheckpointRecord rec;
        hs >> rec.name;
        Shape shape;
        long long d;
        while (hs >> d) {
            if (d <= 0)
                throw DataFormatError("bad shape for record '" + rec.name + "' in " + path);
            shape.push_back(static_cast<int>(d));
        }
        if (rec.name.empty() || shape.empty())
            throw DataFormatError("malformed record header in " + path + ": '" + line + "'");
        int64_t n = 1;
        for (int dim : shape) n *= dim;
        std::vector<double> values(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            if (!(in >> values[static_cast<size_t>(i)]))
                throw DataFormatError("truncated values for record '" + rec.name + "' in " + path);
            if (!std::isfinite(values[static_cast<size_t>(i)]))
                throw DataFormatError("non-finite value in record '" + rec.name + "' in " + path);
        }
        in.ignore(std::numeric_limits<std::streamsize>::max(), '\n');
        rec.tensor = Tensor::from(std::move(shape), std::move(values));
        records.push_back(std::move(rec));
    }
    if (records.empty()) throw DataFormatError("checkpoint " + path + " has no records");
    return records;
}

const CheckpointRecord& find_record(const std::vector<CheckpointRecord>& records,
                                    const std::string& name) {
    for (const auto& r : records)
        if (r.name == name) return r;
    throw DataFormatError("checkpoint is missing record '" + name + "'");
}

}  // namespace sblab
