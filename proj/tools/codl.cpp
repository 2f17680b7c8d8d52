#include <cstdio>

int main() {
    std::printf("codl cli placeholder\n");
    return 0;
}
