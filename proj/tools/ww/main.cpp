// SPDX-License-Identifier: Apache-2.0
#include <cstdio>

#include "cli_util.hpp"

int main(int argc, char** argv) {
    CLI::App app{"ww: behavioral vectors from weight differences, range monitoring and steering"};
    app.require_subcommand(1);
    app.set_version_flag("--version", "ww 0.1.0");
    wwcli::add_extract(app);
    wwcli::add_calibrate(app);
    wwcli::add_monitor(app);
    wwcli::add_steer(app);
    wwcli::add_serve(app);
    wwcli::add_baseline(app);
    wwcli::add_synth(app);
    wwcli::add_fpr_bound(app);
    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ww::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return e.exit_code();
    } catch (const nlohmann::json::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 3;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}
