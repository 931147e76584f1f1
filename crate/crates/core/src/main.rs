use std::io::Write;

use clap::Parser;
use cru::cli::{run, Cli, Command};

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage_error = e.use_stderr();
            let _ = e.print();
            // Malformed command lines are configuration errors.
            std::process::exit(if usage_error { 1 } else { 0 });
        }
    };
    init_logging(&cli);
    std::process::exit(run(cli));
}

/// Line-oriented `level=… key=value` records on stderr; training runs also
/// append them to `<out>/train.log`.
fn init_logging(cli: &Cli) {
    let log_file = match &cli.command {
        Command::Train(a) => cru::cli::resolve_train(a).ok().and_then(|rc| {
            std::fs::create_dir_all(&rc.out).ok()?;
            std::fs::File::create(rc.out.join("train.log")).ok()
        }),
        _ => None,
    };
    let mut builder =
        env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"));
    builder.format(|buf, record| writeln!(buf, "level={} {}", record.level(), record.args()));
    if let Some(file) = log_file {
        builder.target(env_logger::Target::Pipe(Box::new(Tee(file))));
    }
    builder.init();
}

struct Tee(std::fs::File);

impl Write for Tee {
    fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
        std::io::stderr().write_all(buf)?;
        self.0.write_all(buf)?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        std::io::stderr().flush()?;
        self.0.flush()
    }
}
