#include "tablevault/refparse.hpp"

#include <algorithm>
#include <cctype>

#include "tablevault/error.hpp"

namespace tablevault::ref {

std::string_view to_string(AccessPattern pattern) noexcept {
    switch (pattern) {
        case AccessPattern::Reduction: return "reduction";
        case AccessPattern::OneToOne: return "one_to_one";
        case AccessPattern::Cumulation: return "cumulation";
        case AccessPattern::Convolution: return "convolution";
        case AccessPattern::Selection: return "selection";
    }
    return "reduction";
}

AccessPattern parse_access_pattern(std::string_view name) {
    for (auto p : {AccessPattern::Reduction, AccessPattern::OneToOne, AccessPattern::Cumulation,
                   AccessPattern::Convolution, AccessPattern::Selection}) {
        if (to_string(p) == name) return p;
    }
    fail(ErrorKind::Validation, "unknown access pattern '" + std::string(name) + "'");
}

std::string_view to_string(Keyword keyword) noexcept {
    return keyword == Keyword::ArtifactFolder ? "artifact_folder" : "id";
}

namespace {

constexpr int kMaxDepth = 32;

bool ident_start(char c) { return std::isalpha(static_cast<unsigned char>(c)) || c == '_'; }
bool ident_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_' || c == '-'; }
bool word_char(char c) { return std::isalnum(static_cast<unsigned char>(c)) || c == '_'; }

std::string_view trim(std::string_view s) {
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.front()))) s.remove_prefix(1);
    while (!s.empty() && std::isspace(static_cast<unsigned char>(s.back()))) s.remove_suffix(1);
    return s;
}

class Parser {
public:
    explicit Parser(std::string_view src) : src_(src) {}

    RefExpr parse_top() {
        skip_ws();
        RefExpr expr;
        const auto begin = pos_;
        if (peek() == '~') {
            expr.keyword = parse_keyword();
        } else {
            expr = parse_refstring(0);
        }
        skip_ws();
        if (!at_end()) error("unexpected trailing text");
        expr.raw = std::string(src_.substr(begin));
        return expr;
    }

private:
    [[noreturn]] void error(const std::string& what) const { throw Error(ErrorKind::Parse, what, pos_); }

    [[nodiscard]] bool at_end() const { return pos_ >= src_.size(); }
    [[nodiscard]] char peek(std::size_t ahead = 0) const {
        return pos_ + ahead < src_.size() ? src_[pos_ + ahead] : '\0';
    }
    [[nodiscard]] bool looking_at(std::string_view s) const { return src_.substr(pos_, s.size()) == s; }

    void skip_ws() {
        while (!at_end() && std::isspace(static_cast<unsigned char>(src_[pos_]))) ++pos_;
    }

    void expect(std::string_view s) {
        if (!looking_at(s)) error("expected '" + std::string(s) + "'");
        pos_ += s.size();
    }

    std::string parse_ident(const char* what) {
        if (!ident_start(peek())) error(std::string("expected ") + what);
        const auto begin = pos_;
        while (!at_end() && ident_char(src_[pos_])) ++pos_;
        return std::string(src_.substr(begin, pos_ - begin));
    }

    Keyword parse_keyword() {
        const auto begin = pos_;
        expect("~");
        const auto close = src_.find('~', pos_);
        if (close == std::string_view::npos) {
            pos_ = begin;
            error("unterminated keyword");
        }
        const auto name = src_.substr(pos_, close - pos_);
        if (name == "artifact_folder") {
            pos_ = close + 1;
            return Keyword::ArtifactFolder;
        }
        if (name == "id") {
            pos_ = close + 1;
            return Keyword::Id;
        }
        pos_ = begin;
        error("unknown keyword '~" + std::string(name) + "~'");
    }

    RefExpr parse_refstring(int depth) {
        if (depth > kMaxDepth) error("reference nesting too deep");
        const auto begin = pos_;
        expect("<<");
        skip_ws();
        RefExpr expr;
        const auto target_pos = pos_;
        auto target = parse_ident("table name or 'self'");
        if (target == "self") {
            expr.self = true;
        } else {
            expr.table = std::move(target);
        }
        if (peek() == '@') {
            if (expr.self) error("'self' takes no instance selector");
            ++pos_;
            const auto id = src_.substr(pos_, 29);
            if (!is_instance_id(id)) error("malformed instance id");
            expr.instance = std::string(id);
            pos_ += 29;
        }
        (void)target_pos;
        skip_ws();
        if (peek() == '.') {
            ++pos_;
            skip_ws();
            expr.column = parse_ident("column name");
            skip_ws();
        }
        if (peek() == '#') {
            ++pos_;
            std::string facet = parse_ident("metadata facet");
            while (peek() == '.') {
                ++pos_;
                facet += "." + parse_ident("metadata facet component");
            }
            expr.facet = std::move(facet);
            skip_ws();
        }
        if (peek() == '[') {
            ++pos_;
            for (;;) {
                skip_ws();
                expr.filters.push_back(parse_filter(depth));
                skip_ws();
                if (peek() == ',') {
                    ++pos_;
                    continue;
                }
                if (peek() == ']') {
                    ++pos_;
                    break;
                }
                error("expected ',' or ']' in filter list");
            }
            skip_ws();
        }
        if (!looking_at(">>")) error("expected '>>'");
        pos_ += 2;
        expr.raw = std::string(src_.substr(begin, pos_ - begin));
        return expr;
    }

    Filter parse_filter(int depth) {
        Filter filter;
        const auto save = pos_;
        if (ident_start(peek()) && !looking_at("self.")) {
            auto key = parse_ident("filter key");
            skip_ws();
            if (looking_at("::")) {
                pos_ += 2;
                if (key == "index") {
                    filter.key.kind = FilterKey::Kind::Index;
                } else if (key == "operation") {
                    filter.key.kind = FilterKey::Kind::Operation;
                } else {
                    filter.key.kind = FilterKey::Kind::Column;
                    filter.key.column = std::move(key);
                }
            } else {
                pos_ = save;
            }
        }
        skip_ws();
        if (looking_at("<<")) {
            filter.value = Box<RefExpr>(parse_refstring(depth + 1));
            return filter;
        }
        std::optional<Term> start;
        if (!(peek() == ':' && peek(1) != ':')) start = parse_term();
        skip_ws();
        if (peek() == ':' && peek(1) != ':') {
            const auto slice_pos = pos_;
            ++pos_;
            skip_ws();
            std::optional<Term> stop;
            if (peek() != ',' && peek() != ']') stop = parse_term();
            skip_ws();
            if (peek() == ':') error("malformed slice");
            if (!filter.key.is_index()) {
                pos_ = slice_pos;
                error("malformed slice: slices are only valid for index filters");
            }
            for (const auto* t : {&start, &stop}) {
                if (*t && (std::holds_alternative<std::string>(**t) || std::holds_alternative<Keyword>(**t))) {
                    pos_ = slice_pos;
                    error("malformed slice: bounds must be integers or self terms");
                }
            }
            filter.value = Slice{std::move(start), std::move(stop)};
            return filter;
        }
        if (!start) error("expected filter value");
        filter.value = std::move(*start);
        return filter;
    }

    Term parse_term() {
        const char c = peek();
        if (c == '\'' || c == '"') return parse_string();
        if (c == '~') return parse_keyword();
        if (c == '-' || c == '+' || std::isdigit(static_cast<unsigned char>(c))) return parse_int();
        if (looking_at("self.")) {
            pos_ += 5;
            if (looking_at("index") && !word_char(peek(5))) {
                pos_ += 5;
                skip_ws();
                SelfIndex term;
                if (peek() == '+' || peek() == '-') {
                    const bool neg = peek() == '-';
                    ++pos_;
                    skip_ws();
                    if (!std::isdigit(static_cast<unsigned char>(peek()))) error("expected offset after self.index");
                    const auto v = parse_digits();
                    term.offset = neg ? -v : v;
                }
                return term;
            }
            return SelfColumn{parse_ident("column after 'self.'")};
        }
        error("expected integer, string, self term, or keyword");
    }

    std::int64_t parse_digits() {
        const auto begin = pos_;
        std::int64_t v = 0;
        while (std::isdigit(static_cast<unsigned char>(peek()))) {
            if (v > (INT64_MAX - 9) / 10) {
                pos_ = begin;
                error("integer overflow");
            }
            v = v * 10 + (peek() - '0');
            ++pos_;
        }
        if (pos_ == begin) error("expected digits");
        return v;
    }

    std::int64_t parse_int() {
        bool neg = false;
        if (peek() == '-' || peek() == '+') {
            neg = peek() == '-';
            ++pos_;
        }
        const auto v = parse_digits();
        return neg ? -v : v;
    }

    std::string parse_string() {
        const char quote = peek();
        const auto begin = pos_;
        ++pos_;
        std::string out;
        while (!at_end() && peek() != quote) {
            if (peek() == '\\') {
                ++pos_;
                if (at_end()) break;
            }
            out.push_back(peek());
            ++pos_;
        }
        if (at_end()) {
            pos_ = begin;
            error("unterminated string literal");
        }
        ++pos_;
        return out;
    }

    std::string_view src_;
    std::size_t pos_ = 0;
};

void print_term(std::string& out, const Term& term) {
    std::visit(
        [&](const auto& t) {
            using T = std::decay_t<decltype(t)>;
            if constexpr (std::is_same_v<T, std::int64_t>) {
                out += std::to_string(t);
            } else if constexpr (std::is_same_v<T, std::string>) {
                out.push_back('"');
                for (char c : t) {
                    if (c == '"' || c == '\\') out.push_back('\\');
                    out.push_back(c);
                }
                out.push_back('"');
            } else if constexpr (std::is_same_v<T, SelfIndex>) {
                out += "self.index";
                if (t.offset > 0) out += "+" + std::to_string(t.offset);
                if (t.offset < 0) out += "-" + std::to_string(-t.offset);
            } else if constexpr (std::is_same_v<T, SelfColumn>) {
                out += "self." + t.column;
            } else {
                out += "~" + std::string(to_string(t)) + "~";
            }
        },
        term);
}

void print_expr(std::string& out, const RefExpr& e) {
    if (e.keyword) {
        out += "~" + std::string(to_string(*e.keyword)) + "~";
        return;
    }
    out += "<<";
    out += e.self ? std::string("self") : e.table;
    if (e.instance) out += "@" + *e.instance;
    if (e.column) out += "." + *e.column;
    if (e.facet) out += "#" + *e.facet;
    if (!e.filters.empty()) {
        out.push_back('[');
        for (std::size_t i = 0; i < e.filters.size(); ++i) {
            if (i) out.push_back(',');
            const auto& f = e.filters[i];
            switch (f.key.kind) {
                case FilterKey::Kind::Bare: break;
                case FilterKey::Kind::Index: out += "index::"; break;
                case FilterKey::Kind::Operation: out += "operation::"; break;
                case FilterKey::Kind::Column: out += f.key.column + "::"; break;
            }
            if (const auto* t = std::get_if<Term>(&f.value)) {
                print_term(out, *t);
            } else if (const auto* s = std::get_if<Slice>(&f.value)) {
                if (s->start) print_term(out, *s->start);
                out.push_back(':');
                if (s->stop) print_term(out, *s->stop);
            } else {
                print_expr(out, *std::get<Box<RefExpr>>(f.value));
            }
        }
        out.push_back(']');
    }
    out += ">>";
}

bool term_row_dependent(const Term& t) {
    return std::holds_alternative<SelfIndex>(t) || std::holds_alternative<SelfColumn>(t);
}

bool value_row_dependent(const FilterValue& v) {
    if (const auto* t = std::get_if<Term>(&v)) return term_row_dependent(*t);
    if (const auto* s = std::get_if<Slice>(&v)) {
        return (s->start && term_row_dependent(*s->start)) || (s->stop && term_row_dependent(*s->stop));
    }
    return is_row_dependent(*std::get<Box<RefExpr>>(v));
}

}  // namespace

bool is_reference(std::string_view text) {
    const auto t = trim(text);
    if (t.size() >= 4 && t.substr(0, 2) == "<<" && t.substr(t.size() - 2) == ">>") return true;
    return t.size() >= 3 && t.front() == '~' && t.back() == '~' &&
           std::all_of(t.begin() + 1, t.end() - 1, [](char c) { return word_char(c); });
}

RefExpr parse(std::string_view source) { return Parser(source).parse_top(); }

std::string print(const RefExpr& expr) {
    std::string out;
    print_expr(out, expr);
    return out;
}

AccessPattern classify(const RefExpr& expr) {
    // Precedence when several filters classify: convolution, cumulation,
    // one-to-one, selection.
    bool convolution = false, cumulation = false, one_to_one = false, selection = false;
    for (const auto& f : expr.filters) {
        if (f.key.is_index()) {
            if (const auto* s = std::get_if<Slice>(&f.value)) {
                const bool start_self = s->start && term_row_dependent(*s->start);
                const bool stop_self = s->stop && term_row_dependent(*s->stop);
                if (start_self && stop_self) {
                    convolution = true;
                } else if (!start_self && stop_self) {
                    cumulation = true;
                }
            } else if (value_row_dependent(f.value)) {
                one_to_one = true;
            }
        } else {
            if (value_row_dependent(f.value)) {
                one_to_one = true;
            } else {
                selection = true;
            }
        }
    }
    if (convolution) return AccessPattern::Convolution;
    if (cumulation) return AccessPattern::Cumulation;
    if (one_to_one) return AccessPattern::OneToOne;
    if (selection) return AccessPattern::Selection;
    return AccessPattern::Reduction;
}

bool is_row_dependent(const RefExpr& expr) {
    return std::any_of(expr.filters.begin(), expr.filters.end(),
                       [](const Filter& f) { return value_row_dependent(f.value); });
}

std::set<std::string> referenced_tables(const RefExpr& expr) {
    std::set<std::string> out;
    if (!expr.keyword && !expr.self) out.insert(expr.table);
    for (const auto& f : expr.filters) {
        if (const auto* nested = std::get_if<Box<RefExpr>>(&f.value)) {
            auto inner = referenced_tables(**nested);
            out.insert(inner.begin(), inner.end());
        }
    }
    return out;
}

}  // namespace tablevault::ref
