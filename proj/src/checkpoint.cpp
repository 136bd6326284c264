#include "callosum/checkpoint.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

#include "callosum/errors.hpp"

namespace callosum {

namespace {

void validate_name(const std::string& name) {
    if (name.empty()) throw UsageError("tensor name must be non-empty");
    for (char c : name) {
        if (c <= 0x20 || c == 0x7f)
            throw UsageError("tensor name contains whitespace or control characters: '" + name + "'");
    }
}

void validate_dims(const std::string& name, const std::vector<int64_t>& dims) {
    for (int64_t d : dims) {
        if (d <= 0)
            throw UsageError("tensor '" + name + "' has non-positive dimension");
    }
}

std::string read_line(std::istream& in, const std::string& what) {
    std::string line;
    if (!std::getline(in, line)) throw DataError("checkpoint truncated: expected " + what);
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

} // namespace

const Tensor* Checkpoint::find(const std::string& name) const {
    for (const Tensor& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

Tensor* Checkpoint::find(const std::string& name) {
    for (Tensor& t : tensors)
        if (t.name == name) return &t;
    return nullptr;
}

Tensor& Checkpoint::add(const std::string& name, std::vector<int64_t> dims) {
    validate_name(name);
    validate_dims(name, dims);
    if (find(name)) throw UsageError("duplicate tensor name '" + name + "'");
    Tensor t;
    t.name = name;
    t.dims = std::move(dims);
    t.values.assign(static_cast<size_t>(t.count()), 0.0f);
    tensors.push_back(std::move(t));
    return tensors.back();
}

std::vector<std::string> Checkpoint::names() const {
    std::vector<std::string> out;
    out.reserve(tensors.size());
    for (const Tensor& t : tensors) out.push_back(t.name);
    return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    if (ckpt.meta_json.find('\n') != std::string::npos || ckpt.meta_json.find('\r') != std::string::npos)
        throw UsageError("checkpoint meta json must be a single line");
    for (const Tensor& t : ckpt.tensors) {
        validate_name(t.name);
        validate_dims(t.name, t.dims);
        if (static_cast<int64_t>(t.values.size()) != t.count())
            throw UsageError("tensor '" + t.name + "' value count does not match its dimensions");
    }
    for (size_t i = 0; i < ckpt.tensors.size(); ++i)
        for (size_t j = i + 1; j < ckpt.tensors.size(); ++j)
            if (ckpt.tensors[i].name == ckpt.tensors[j].name)
                throw UsageError("duplicate tensor name '" + ckpt.tensors[i].name + "'");

    std::filesystem::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary);
        if (!out) throw RuntimeFailure("cannot open '" + tmp.string() + "' for writing");
        out << "CALLOSUM-CKPT v1\n";
        out << "META " << ckpt.meta_json << "\n";
        out << "TENSORS " << ckpt.tensors.size() << "\n";
        for (const Tensor& t : ckpt.tensors) {
            out << t.name << "\tf32\t" << t.dims.size() << "\t";
            for (size_t i = 0; i < t.dims.size(); ++i) {
                if (i) out << ' ';
                out << t.dims[i];
            }
            out << "\n";
        }
        out << "DATA\n";
        for (const Tensor& t : ckpt.tensors) {
            out.write(reinterpret_cast<const char*>(t.values.data()),
                      static_cast<std::streamsize>(t.values.size() * sizeof(float)));
        }
        if (!out) throw RuntimeFailure("write failed for '" + tmp.string() + "'");
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    if (ec) throw RuntimeFailure("cannot rename '" + tmp.string() + "' to '" + path.string() + "': " + ec.message());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open checkpoint '" + path.string() + "'");

    std::string line = read_line(in, "magic line");
    if (line != "CALLOSUM-CKPT v1")
        throw DataError("'" + path.string() + "' is not a CALLOSUM-CKPT v1 file (magic line: '" + line + "')");

    line = read_line(in, "META line");
    if (line.rfind("META ", 0) != 0) throw DataError("checkpoint missing META line, got '" + line + "'");
    Checkpoint ckpt;
    ckpt.meta_json = line.substr(5);

    line = read_line(in, "TENSORS line");
    if (line.rfind("TENSORS ", 0) != 0) throw DataError("checkpoint missing TENSORS line, got '" + line + "'");
    size_t n = 0;
    try {
        size_t pos = 0;
        const std::string count_text = line.substr(8);
        long long v = std::stoll(count_text, &pos);
        if (pos != count_text.size() || v < 0) throw std::invalid_argument("count");
        n = static_cast<size_t>(v);
    } catch (const std::logic_error&) {
        throw DataError("bad tensor count in '" + line + "'");
    }

    ckpt.tensors.reserve(n);
    for (size_t i = 0; i < n; ++i) {
        line = read_line(in, "tensor header " + std::to_string(i));
        std::vector<std::string> fields;
        size_t start = 0;
        while (true) {
            size_t tab = line.find('\t', start);
            fields.push_back(line.substr(start, tab == std::string::npos ? tab : tab - start));
            if (tab == std::string::npos) break;
            start = tab + 1;
        }
        if (fields.size() != 4)
            throw DataError("tensor header " + std::to_string(i) + " has " + std::to_string(fields.size()) +
                            " tab fields, expected 4: '" + line + "'");
        Tensor t;
        t.name = fields[0];
        validate_name(t.name);
        if (fields[1] != "f32")
            throw DataError("tensor '" + t.name + "' has unsupported dtype '" + fields[1] + "'");
        std::istringstream dims_in(fields[3]);
        int64_t d = 0;
        while (dims_in >> d) t.dims.push_back(d);
        if (!dims_in.eof())
            throw DataError("tensor '" + t.name + "' has malformed dims '" + fields[3] + "'");
        if (t.dims.size() != static_cast<size_t>(std::stoll(fields[2])))
            throw DataError("tensor '" + t.name + "' rank field " + fields[2] + " does not match " +
                            std::to_string(t.dims.size()) + " listed dims");
        validate_dims(t.name, t.dims);
        if (ckpt.find(t.name)) throw DataError("duplicate tensor name '" + t.name + "'");
        ckpt.tensors.push_back(std::move(t));
    }

    line = read_line(in, "DATA line");
    if (line != "DATA") throw DataError("checkpoint missing DATA line, got '" + line + "'");

    for (Tensor& t : ckpt.tensors) {
        t.values.resize(static_cast<size_t>(t.count()));
        in.read(reinterpret_cast<char*>(t.values.data()),
                static_cast<std::streamsize>(t.values.size() * sizeof(float)));
        if (in.gcount() != static_cast<std::streamsize>(t.values.size() * sizeof(float)))
            throw DataError("checkpoint truncated inside payload of tensor '" + t.name + "'");
    }
    char extra = 0;
    if (in.read(&extra, 1))
        throw DataError("checkpoint has trailing bytes after the last tensor payload");
    return ckpt;
}

} // namespace callosum
