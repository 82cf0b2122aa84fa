#include <atomic>
#include <cstdlib>
#include <string>

#include "dadm/kernels.hpp"

namespace dadm::kernels {

#if defined(DADM_HAVE_AVX2)
const KernelTable* avx2_table_impl();
#endif

const KernelTable* avx2_table() {
#if defined(DADM_HAVE_AVX2) && (defined(__x86_64__) || defined(__i386__))
    static const bool supported = __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
    return supported ? avx2_table_impl() : nullptr;
#else
    return nullptr;
#endif
}

namespace {

const KernelTable* initial_table() {
    const char* env = std::getenv("DADM_KERNELS");
    if (env != nullptr && std::string(env) == "scalar") return &scalar_table();
    if (const KernelTable* t = avx2_table()) return t;
    return &scalar_table();
}

std::atomic<const KernelTable*>& current() {
    static std::atomic<const KernelTable*> table{initial_table()};
    return table;
}

}  // namespace

const KernelTable& active() { return *current().load(std::memory_order_relaxed); }

bool select(std::string_view name) {
    if (name == "scalar") {
        current().store(&scalar_table());
        return true;
    }
    if (name == "avx2") {
        if (const KernelTable* t = avx2_table()) {
            current().store(t);
            return true;
        }
    }
    return false;
}

}  // namespace dadm::kernels
