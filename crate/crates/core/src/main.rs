fn main() -> std::process::ExitCode {
    storyforge::cli::main_entry()
}
