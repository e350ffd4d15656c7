#include <iostream>

int main() {
    std::cout << "sblab: not wired up yet\n";
    return 0;
}
