#pragma once

#include <mutex>

#include "tablevault/repository.hpp"

namespace tablevault {

struct Repository::Impl {
    Impl(Layout l, std::shared_ptr<Environment> e, ops::ExecOptions o)
        : layout(l), env(std::move(e)), ops(l, env, o), view(l) {}

    Layout layout;
    std::shared_ptr<Environment> env;
    ops::OperationManager ops;
    ExecutorRegistry executors;
    CommittedView view;
    std::mutex mu;  // serializes API calls on this handle
};

namespace detail {

bool is_committed(const Layout& layout, const std::string& table, const std::string& instance);
bool table_exists(const Layout& layout, const std::string& table);
/// Instance description.yaml (author, external, status, ...); empty object when absent.
Json instance_meta(const Layout& layout, const std::string& table, const std::string& instance);
std::vector<std::string> instance_ids(const Layout& layout, const std::string& table);
/// Newest temporary instance of the table with the given external flag.
std::optional<std::string> pending_instance(const Layout& layout, const std::string& table, bool external);

/// `caller` is `owner` or one of its ancestors in the author chain.
bool may_act_for(const ops::OperationManager& ops, const std::string& owner, const std::string& caller);

/// Stages lineage.yaml (published after commit) and the reverse-index lines.
void stage_lineage(ops::Operation& op, const Layout& layout, const lineage::LineageRecord& record);

std::vector<std::string> author_chain(const ops::OperationManager& ops, const std::string& op_id,
                                      const std::string& author);

void require_valid_author(const std::string& author);

}  // namespace detail
}  // namespace tablevault
