fn main() {
    std::process::exit(onestep_vsr::evalcli::cli::cli_main(std::env::args_os()));
}
