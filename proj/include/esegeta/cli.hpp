#pragma once

#include <CLI11.hpp>

#include "pipeline.hpp"

// Command-line front end: `run` executes a JSON config, `eval` re-scores a
// finished run, `list-methods` prints the registry, `export-png` renders one
// EVF map over its source volume. Exit codes: 0 all methods succeeded,
// 2 at least one method timed out or failed, 1 fatal (bad config, bad paths).
namespace esegeta {

namespace detail {

inline void print_report_summary(const RunReport& report) {
    for (const auto& m : report.methods) {
        std::printf("%-28s %-8s %10.1f ms", m.id.c_str(), m.status.c_str(), m.elapsed_ms);
        if (!m.message.empty()) std::printf("  %s", m.message.c_str());
        std::printf("\n");
    }
    std::printf("ok=%d timeout=%d error=%d elapsed_ms=%.1f\n", report.ok, report.timeout,
                report.error, report.elapsed_ms);
}

// Reduces an arbitrary EVF tensor to a 2D drawing plane: batched maps are
// channel-averaged, 3D volumes are sliced along `axis` (negative index means
// the middle slice).
inline Tensor plane_for_export(const Tensor& t, int axis, int index) {
    Tensor plane = t;
    if (plane.ndim() >= 4) {
        if (plane.shape()[0] != 1)
            throw std::invalid_argument("export-png: batch extent must be 1, got " +
                                        shape_to_string(plane.shape()));
        plane = channel_mean(plane);
    }
    if (plane.ndim() == 3) {
        int idx = index;
        if (idx < 0) idx = plane.shape()[static_cast<size_t>(axis)] / 2;
        plane = slice_3d(plane, axis, idx);
    }
    if (plane.ndim() != 2)
        throw std::invalid_argument("export-png: cannot reduce shape " + shape_to_string(t.shape()) +
                                    " to a 2d plane");
    return plane;
}

}  // namespace detail

inline int cli_main(int argc, char** argv) {
    CLI::App app{"attribution pipeline for tiny segmentation networks"};
    app.set_version_flag("--version", std::string(kVersion));
    app.require_subcommand(1);

    std::string run_config;
    CLI::App* run = app.add_subcommand("run", "execute every method in a JSON config");
    run->add_option("config", run_config, "pipeline config (JSON)")->required();

    std::string eval_config;
    CLI::App* eval = app.add_subcommand("eval", "re-score the maps of a finished run");
    eval->add_option("config", eval_config, "pipeline config (JSON)")->required();

    CLI::App* list = app.add_subcommand("list-methods", "print every registered method id");

    std::string png_in, png_base, png_out;
    int png_axis = 0, png_index = -1;
    double png_percentile = 99.0;
    CLI::App* export_png = app.add_subcommand("export-png", "render an EVF map over its volume");
    export_png->add_option("--in", png_in, "attribution map (EVF)")->required();
    export_png->add_option("--base", png_base, "source volume (EVF)")->required();
    export_png->add_option("--out", png_out, "output image (PNG)")->required();
    export_png->add_option("--axis", png_axis, "slice axis for 3d volumes")
        ->check(CLI::Range(0, 2));
    export_png->add_option("--index", png_index, "slice index (default: middle)");
    export_png->add_option("--percentile", png_percentile, "|value| percentile mapped to full red");

    CLI11_PARSE(app, argc, argv);

    try {
        if (run->parsed()) {
            const RunReport report = run_pipeline(load_config_file(run_config));
            detail::print_report_summary(report);
            return (report.timeout + report.error) > 0 ? 2 : 0;
        }
        if (eval->parsed()) {
            const RunReport report = run_eval_pass(load_config_file(eval_config));
            detail::print_report_summary(report);
            return (report.timeout + report.error) > 0 ? 2 : 0;
        }
        if (list->parsed()) {
            for (const auto& [id, entry] : method_registry()) std::printf("%s\n", id.c_str());
            return 0;
        }
        if (export_png->parsed()) {
            const Tensor base = detail::plane_for_export(read_evf(png_base), png_axis, png_index);
            Tensor attr = detail::plane_for_export(read_evf(png_in), png_axis, png_index);
            attr = detail::resize_nearest(attr, base.shape());
            export_overlay_png(base, attr, png_out, png_percentile);
            return 0;
        }
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 1;
    }
    return 0;
}

}  // namespace esegeta
