#pragma once

#include "magslam/csv.hpp"
#include "magslam/types.hpp"

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace magslam {

/// Minimal INI-style config: [section] headers, key = value lines,
/// '#' or ';' comments. Keys keep insertion order for deterministic writing.
class Ini {
public:
    void set(const std::string& section, const std::string& key, const std::string& value) {
        auto& sec = section_ref(section);
        for (auto& kv : sec.items) {
            if (kv.first == key) {
                kv.second = value;
                return;
            }
        }
        sec.items.emplace_back(key, value);
    }

    void set_double(const std::string& section, const std::string& key, double v) {
        set(section, key, fmt_double(v));
    }

    bool has(const std::string& section, const std::string& key) const {
        const auto* sec = find_section(section);
        if (!sec) return false;
        for (const auto& kv : sec->items)
            if (kv.first == key) return true;
        return false;
    }

    std::string get(const std::string& section, const std::string& key) const {
        const auto* sec = find_section(section);
        if (sec)
            for (const auto& kv : sec->items)
                if (kv.first == key) return kv.second;
        throw InputError("config: missing key [" + section + "] " + key);
    }

    std::string get_or(const std::string& section, const std::string& key,
                       const std::string& dflt) const {
        return has(section, key) ? get(section, key) : dflt;
    }

    double get_double(const std::string& section, const std::string& key) const {
        return parse_num(get(section, key), section, key);
    }

    double get_double_or(const std::string& section, const std::string& key, double dflt) const {
        return has(section, key) ? get_double(section, key) : dflt;
    }

    long get_int_or(const std::string& section, const std::string& key, long dflt) const {
        if (!has(section, key)) return dflt;
        const double v = get_double(section, key);
        const long n = static_cast<long>(v);
        if (static_cast<double>(n) != v)
            throw InputError("config: [" + section + "] " + key + " must be an integer");
        return n;
    }

    bool get_bool_or(const std::string& section, const std::string& key, bool dflt) const {
        if (!has(section, key)) return dflt;
        const std::string v = get(section, key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw InputError("config: [" + section + "] " + key + " must be a boolean");
    }

    /// Comma-separated list of numbers.
    std::vector<double> get_list(const std::string& section, const std::string& key) const {
        std::vector<double> out;
        std::stringstream ss(get(section, key));
        std::string item;
        while (std::getline(ss, item, ',')) out.push_back(parse_num(trim(item), section, key));
        if (out.empty()) throw InputError("config: [" + section + "] " + key + " list is empty");
        return out;
    }

    static Ini load(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw InputError("cannot open config file: " + path);
        Ini ini;
        std::string line, section;
        int line_no = 0;
        while (std::getline(in, line)) {
            ++line_no;
            std::string s = trim(line);
            if (s.empty() || s[0] == '#' || s[0] == ';') continue;
            if (s.front() == '[') {
                if (s.back() != ']')
                    throw InputError(path + ":" + std::to_string(line_no) + ": malformed section");
                section = trim(s.substr(1, s.size() - 2));
                ini.section_ref(section);
                continue;
            }
            const auto eq = s.find('=');
            if (eq == std::string::npos)
                throw InputError(path + ":" + std::to_string(line_no) + ": expected key = value");
            ini.set(section, trim(s.substr(0, eq)), trim(s.substr(eq + 1)));
        }
        return ini;
    }

    void save(const std::string& path) const {
        std::ofstream out(path);
        if (!out) throw InputError("cannot write config file: " + path);
        out << str();
    }

    std::string str() const {
        std::ostringstream out;
        bool first = true;
        for (const auto& sec : sections_) {
            if (!first) out << "\n";
            first = false;
            out << "[" << sec.name << "]\n";
            for (const auto& kv : sec.items) out << kv.first << " = " << kv.second << "\n";
        }
        return out.str();
    }

private:
    struct Section {
        std::string name;
        std::vector<std::pair<std::string, std::string>> items;
    };

    static std::string trim(const std::string& s) {
        size_t a = s.find_first_not_of(" \t");
        size_t b = s.find_last_not_of(" \t");
        return a == std::string::npos ? "" : s.substr(a, b - a + 1);
    }

    static double parse_num(const std::string& s, const std::string& section,
                            const std::string& key) {
        try {
            size_t pos = 0;
            const double v = std::stod(s, &pos);
            if (pos != s.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw InputError("config: [" + section + "] " + key + ": cannot parse '" + s + "'");
        }
    }

    Section& section_ref(const std::string& name) {
        for (auto& s : sections_)
            if (s.name == name) return s;
        sections_.push_back({name, {}});
        return sections_.back();
    }

    const Section* find_section(const std::string& name) const {
        for (const auto& s : sections_)
            if (s.name == name) return &s;
        return nullptr;
    }

    std::vector<Section> sections_;
};

}  // namespace magslam
