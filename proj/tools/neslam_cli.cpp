#include <cstdio>

int main() {
    std::printf("neslam cli placeholder\n");
    return 0;
}
