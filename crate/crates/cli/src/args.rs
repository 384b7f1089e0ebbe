//! Command-line grammar. Config overrides use `--section.key value` (or
//! `--section.key=value`) and are split off before the subcommand parser runs.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "wspace", version, about = "Layerwise latent-space text-guided generation and editing")]
pub struct Cli {
    /// Config file; defaults to $WSPACE_CONFIG, then built-in defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,

    /// Overrides `workdir` from the config.
    #[arg(long, global = true)]
    pub workdir: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Dataset operations.
    #[command(subcommand)]
    Dataset(DatasetCommand),
    /// Train one model; frozen dependencies are loaded from the checkpoint directory.
    #[command(subcommand)]
    Train(TrainCommand),
    /// Images from text, optionally conditioned on a sketch or label map.
    Generate(GenerateArgs),
    /// Text-driven edit of a whole image.
    Edit(EditArgs),
    /// Text-driven edit restricted to a painted region.
    RoiEdit(RoiEditArgs),
    /// Measure which layers control which attributes.
    ProbeLayers(ProbeArgs),
    /// Generation and editing metrics.
    Eval(EvalArgs),
    /// HTTP service.
    Serve(ServeArgs),
    /// Print the effective configuration as TOML.
    Config,
}

#[derive(Debug, Subcommand)]
pub enum DatasetCommand {
    /// Render the procedural dataset with sketches, label maps and descriptions.
    Build {
        /// Output directory; defaults to <workdir>/dataset.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum InputModality {
    Photo,
    Sketch,
    Label,
}

#[derive(Debug, Subcommand)]
pub enum TrainCommand {
    /// Generator (variant from generator.model.variant).
    Generator,
    /// Image encoder for photos, sketches or label maps.
    Inversion {
        #[arg(long, value_enum, default_value = "photo")]
        modality: InputModality,
        /// Train the latent-regression baseline instead (photos only).
        #[arg(long)]
        baseline: bool,
    },
    /// Text encoder aligned to the inversion encoder.
    Text,
    /// Encoder for partially observed images.
    Masked,
    /// Learned dual-encoder similarity model.
    Similarity,
    /// Attribute classifier whose intermediate features serve as F.
    Features,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub text: String,
    #[arg(short = 'n', long, default_value_t = 8)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `A`/`encoder_mixing` or `B`/`guided_optimization`.
    #[arg(long, default_value = "A")]
    pub strategy: String,
    /// Grayscale sketch PNG to condition on.
    #[arg(long, conflicts_with = "label")]
    pub sketch: Option<PathBuf>,
    /// Grayscale PNG of part ids to condition on.
    #[arg(long)]
    pub label: Option<PathBuf>,
    /// Output directory; defaults to <workdir>/outputs/<run id>.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    /// Source image; required unless continuing a session.
    #[arg(long)]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub text: String,
    #[arg(long, default_value = "A")]
    pub strategy: String,
    /// Session to create or continue.
    #[arg(long)]
    pub session: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RoiEditArgs {
    #[arg(long)]
    pub image: Option<PathBuf>,
    /// Grayscale PNG; nonzero pixels are the region to edit.
    #[arg(long)]
    pub mask: PathBuf,
    #[arg(long)]
    pub text: String,
    #[arg(long)]
    pub session: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    /// Output path; defaults to <workdir>/checkpoints/layers.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Report path; defaults to <workdir>/eval.json.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Overrides serve.addr.
    #[arg(long)]
    pub addr: Option<String>,
}

/// Positional arguments and `(key, value)` overrides.
type Split = (Vec<String>, Vec<(String, String)>);

/// Split `--section.key value` pairs out of `argv`.
pub fn split_overrides(argv: Vec<String>) -> Result<Split, String> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut overrides = Vec::new();
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        let Some(body) = a.strip_prefix("--") else {
            rest.push(a);
            continue;
        };
        let key_part = body.split('=').next().unwrap_or("");
        if !key_part.contains('.') {
            rest.push(a);
            continue;
        }
        match body.split_once('=') {
            Some((k, v)) => overrides.push((k.to_string(), v.to_string())),
            None => {
                let v = it.next().ok_or_else(|| format!("override --{body} needs a value"))?;
                overrides.push((body.to_string(), v));
            }
        }
    }
    Ok((rest, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn v(s: &[&str]) -> Vec<String> {
        s.iter().map(|x| x.to_string()).collect()
    }

    #[test]
    fn overrides_are_split_off() {
        let (rest, o) = split_overrides(v(&["wspace", "--optim.lambda3", "0", "generate", "--text", "a.b", "--serve.addr=x:1"])).unwrap();
        assert_eq!(rest, v(&["wspace", "generate", "--text", "a.b"]));
        assert_eq!(o, vec![("optim.lambda3".into(), "0".into()), ("serve.addr".into(), "x:1".into())]);
        assert!(split_overrides(v(&["wspace", "--optim.lambda3"])).is_err());
    }

    #[test]
    fn grammar_is_consistent() {
        use clap::CommandFactory;
        Cli::command().debug_assert();
    }
}
