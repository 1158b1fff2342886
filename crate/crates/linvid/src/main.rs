use std::process::ExitCode;

use linvid::alloc_track::CountingAlloc;
use linvid::config::Env;

#[global_allocator]
static ALLOC: CountingAlloc = CountingAlloc;

fn main() -> ExitCode {
    let code = linvid::cli::main_with(std::env::args(), &Env::from_process(), &mut std::io::stderr());
    ExitCode::from(code)
}
