// Placeholder main; the experiment CLI is assembled once the solver and
// harness headers land.
#include <cstdio>

int main() {
    std::puts("fsadapt: not yet wired");
    return 0;
}
