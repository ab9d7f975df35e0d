#include <algorithm>
#include <numeric>

#include "tablevault/error.hpp"
#include "tablevault/refparse.hpp"

namespace tablevault::ref {

Cell Value::as_scalar() const {
    switch (data_.index()) {
        case 0: return scalar();
        case 1:
            if (column().size() == 1) return column().front();
            fail(ErrorKind::Type, "expected a scalar, selection has " + std::to_string(column().size()) + " values");
        case 2:
            if (frame().num_rows() == 1 && frame().num_columns() == 1) return frame().at(0, 0);
            fail(ErrorKind::Type, "expected a scalar, got a " + std::to_string(frame().num_rows()) + "x" +
                                      std::to_string(frame().num_columns()) + " frame");
        default: {
            const auto& d = document();
            if (d.is_string()) return Cell{d.get<std::string>()};
            if (d.is_boolean()) return Cell{d.get<bool>()};
            if (d.is_number_integer()) return Cell{d.get<std::int64_t>()};
            if (d.is_number()) return Cell{d.get<double>()};
            fail(ErrorKind::Type, "expected a scalar, got a metadata document");
        }
    }
}

Json Value::to_json() const {
    switch (data_.index()) {
        case 0: return cell_to_json(scalar());
        case 1: {
            Json arr = Json::array();
            for (const auto& c : column()) arr.push_back(cell_to_json(c));
            return arr;
        }
        case 2: return frame().to_json();
        default: return document();
    }
}

namespace {

struct Target {
    std::shared_ptr<const TabularData> frame;
    fs::path artifact_dir;
    std::string table;
    std::string instance;
};

std::string bind_instance(const RefExpr& e, const ResolutionContext& ctx) {
    if (!ctx.repo) fail(ErrorKind::Resolve, "no repository view");
    if (e.instance) {
        if (!ctx.repo->has_instance(e.table, *e.instance)) {
            fail(ErrorKind::Resolve, "no committed instance " + e.table + "@" + *e.instance);
        }
        return *e.instance;
    }
    if (auto it = ctx.pins.find(e.table); it != ctx.pins.end()) return it->second;
    return ctx.repo->latest_instance(e.table);
}

void report(const ResolutionContext& ctx, Access access) {
    if (ctx.on_access) ctx.on_access(access);
}

Target open_target(const RefExpr& e, const ResolutionContext& ctx) {
    if (e.self) {
        if (!ctx.self || !ctx.self->frame) fail(ErrorKind::Context, "'self' is only valid inside an executing builder");
        return {ctx.self->frame, ctx.self->artifact_dir, "self", ""};
    }
    Target t;
    t.table = e.table;
    t.instance = bind_instance(e, ctx);
    t.frame = ctx.repo->frame(t.table, t.instance);
    t.artifact_dir = ctx.repo->artifact_dir(t.table, t.instance);
    return t;
}

std::size_t current_row(const ResolutionContext& ctx) {
    if (!ctx.row) fail(ErrorKind::Context, "self term used without a current row");
    return *ctx.row;
}

Cell term_cell(const Term& term, const ResolutionContext& ctx) {
    return std::visit(
        [&](const auto& t) -> Cell {
            using T = std::decay_t<decltype(t)>;
            if constexpr (std::is_same_v<T, std::int64_t>) {
                return t;
            } else if constexpr (std::is_same_v<T, std::string>) {
                return t;
            } else if constexpr (std::is_same_v<T, SelfIndex>) {
                return static_cast<std::int64_t>(current_row(ctx)) + t.offset;
            } else if constexpr (std::is_same_v<T, SelfColumn>) {
                const auto row = current_row(ctx);
                if (!ctx.self || !ctx.self->frame) fail(ErrorKind::Context, "self column used outside a builder");
                const auto& f = *ctx.self->frame;
                const auto col = f.require_column(t.column);
                if (row >= f.num_rows()) fail(ErrorKind::Range, "current row outside the executing instance");
                return f.at(row, col);
            } else {
                if (t == Keyword::Id) {
                    if (!ctx.op_id) fail(ErrorKind::Context, "~id~ used outside an operation");
                    return *ctx.op_id;
                }
                if (!ctx.artifact_folder) fail(ErrorKind::Context, "~artifact_folder~ used outside an operation");
                return ctx.artifact_folder->string();
            }
        },
        term);
}

std::int64_t index_value(const Cell& cell) {
    if (const auto* i = std::get_if<std::int64_t>(&cell)) return *i;
    fail(ErrorKind::Type, "index filter value is not an integer");
}

Cell filter_scalar(const FilterValue& v, const ResolutionContext& ctx) {
    if (const auto* t = std::get_if<Term>(&v)) return term_cell(*t, ctx);
    return resolve(*std::get<Box<RefExpr>>(v), ctx).as_scalar();
}

bool cells_equal(const Cell& cell, const Cell& probe, Dtype dtype) {
    const auto coerced = coerce(probe, dtype);
    if (!coerced) return false;
    return cell == *coerced;
}

struct Selection {
    std::vector<std::size_t> positions;
    bool point = false;
    bool operation_fallback = false;
};

Selection apply_filters(const RefExpr& e, const TabularData& frame, const ResolutionContext& ctx) {
    Selection sel;
    sel.positions.resize(frame.num_rows());
    std::iota(sel.positions.begin(), sel.positions.end(), std::size_t{0});
    for (const auto& f : e.filters) {
        auto& pos = sel.positions;
        const auto n = static_cast<std::int64_t>(pos.size());
        if (f.key.is_index()) {
            if (const auto* s = std::get_if<Slice>(&f.value)) {
                const auto clamp = [n](std::int64_t v) { return std::clamp<std::int64_t>(v, 0, n); };
                const auto start = s->start ? clamp(index_value(term_cell(*s->start, ctx))) : 0;
                const auto stop = s->stop ? clamp(index_value(term_cell(*s->stop, ctx))) : n;
                std::vector<std::size_t> next;
                for (auto i = start; i < stop; ++i) next.push_back(pos[static_cast<std::size_t>(i)]);
                pos = std::move(next);
            } else {
                const auto i = index_value(filter_scalar(f.value, ctx));
                if (i < 0 || i >= n) {
                    fail(ErrorKind::Range, "index " + std::to_string(i) + " out of range for " + std::to_string(n) +
                                               " rows");
                }
                pos = {pos[static_cast<std::size_t>(i)]};
            }
            continue;
        }
        const auto probe = filter_scalar(f.value, ctx);
        const bool operation = f.key.kind == FilterKey::Kind::Operation;
        const auto col = frame.column_index(operation ? std::string("operation") : f.key.column);
        if (!col && !operation) fail(ErrorKind::Resolve, "unknown column '" + f.key.column + "'");
        std::vector<std::size_t> next;
        if (col) {
            const auto dtype = frame.columns()[*col].dtype;
            for (auto p : pos) {
                if (cells_equal(frame.at(p, *col), probe, dtype)) next.push_back(p);
            }
        }
        if (operation && next.empty() && !pos.empty()) {
            next = {pos.back()};
            sel.operation_fallback = true;
        }
        pos = std::move(next);
    }
    const bool all_equality = !e.filters.empty() && std::none_of(e.filters.begin(), e.filters.end(), [](const Filter& f) {
        return std::holds_alternative<Slice>(f.value);
    });
    if (all_equality && sel.positions.size() == 1) sel.point = true;
    return sel;
}

Cell absolutize(Cell cell, Dtype dtype, const fs::path& artifact_dir) {
    if (dtype == Dtype::ArtifactString) {
        if (const auto* s = std::get_if<std::string>(&cell)) return (artifact_dir / *s).string();
    }
    return cell;
}

}  // namespace

Json resolve_metadata(const RefExpr& expr, const ResolutionContext& ctx) {
    if (!expr.facet) fail(ErrorKind::Resolve, "expression has no metadata facet");
    if (expr.self) {
        if (!ctx.self || !ctx.self->metadata) fail(ErrorKind::Context, "'self' metadata outside a builder");
        return ctx.self->metadata(*expr.facet);
    }
    const auto instance = bind_instance(expr, ctx);
    report(ctx, Access{expr.table, instance, std::nullopt, true, false});
    return ctx.repo->metadata(expr.table, instance, *expr.facet);
}

Value resolve(const RefExpr& expr, const ResolutionContext& ctx) {
    if (expr.keyword) return Value(term_cell(*expr.keyword, ctx));
    if (expr.facet) {
        if (!expr.filters.empty() || expr.column) fail(ErrorKind::Resolve, "metadata facets take no column or filters");
        return Value(resolve_metadata(expr, ctx));
    }
    const auto target = open_target(expr, ctx);
    const auto& frame = *target.frame;
    std::optional<std::size_t> col;
    if (expr.column) col = frame.require_column(*expr.column);

    const auto sel = apply_filters(expr, frame, ctx);
    if (!expr.self) report(ctx, Access{target.table, target.instance, expr.column, false, sel.operation_fallback});

    if (col) {
        const auto dtype = frame.columns()[*col].dtype;
        if (sel.point) return Value(absolutize(frame.at(sel.positions.front(), *col), dtype, target.artifact_dir));
        Value::Column out;
        out.reserve(sel.positions.size());
        for (auto p : sel.positions) out.push_back(absolutize(frame.at(p, *col), dtype, target.artifact_dir));
        return Value(std::move(out));
    }
    auto out = frame.select_rows(sel.positions);
    for (std::size_t c = 0; c < out.num_columns(); ++c) {
        const auto dtype = out.columns()[c].dtype;
        if (dtype != Dtype::ArtifactString) continue;
        for (std::size_t r = 0; r < out.num_rows(); ++r) out.at(r, c) = absolutize(out.at(r, c), dtype, target.artifact_dir);
    }
    return Value(std::move(out));
}

namespace {

void collect(const RefExpr& e, const ResolutionContext& ctx, std::vector<Dependency>& out) {
    if (!e.keyword && !e.self) {
        Dependency dep;
        dep.table = e.table;
        dep.instance = bind_instance(e, ctx);
        dep.pattern = classify(e);
        if (e.column) {
            dep.columns.insert(*e.column);
            for (const auto& f : e.filters) {
                if (f.key.kind == FilterKey::Kind::Column) dep.columns.insert(f.key.column);
            }
        }
        auto it = std::find_if(out.begin(), out.end(), [&](const Dependency& d) {
            return d.table == dep.table && d.instance == dep.instance;
        });
        if (it == out.end()) {
            out.push_back(std::move(dep));
        } else if (!it->columns.empty()) {
            if (dep.columns.empty()) {
                it->columns.clear();
            } else {
                it->columns.insert(dep.columns.begin(), dep.columns.end());
            }
        }
    }
    for (const auto& f : e.filters) {
        if (const auto* nested = std::get_if<Box<RefExpr>>(&f.value)) collect(**nested, ctx, out);
    }
}

}  // namespace

std::vector<Dependency> extract_dependencies(const RefExpr& expr, const ResolutionContext& ctx) {
    std::vector<Dependency> out;
    collect(expr, ctx, out);
    return out;
}

}  // namespace tablevault::ref
