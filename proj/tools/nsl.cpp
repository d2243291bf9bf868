#include <nsl/cli.hpp>

int main(int argc, char** argv)
{
    return nsl::cli::main(argc, argv);
}
