//! Line-delimited episode corpora, one JSON instance per line.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use super::TaskInstance;

pub fn write_jsonl(path: &Path, instances: &[TaskInstance]) -> std::io::Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for inst in instances {
        serde_json::to_writer(&mut out, inst)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

pub fn read_jsonl(path: &Path) -> std::io::Result<Vec<TaskInstance>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::Rng;
    use crate::tasks::{sample_episode, RuleFamily};

    #[test]
    fn corpus_round_trips() {
        let mut rng = Rng::new(1);
        let episodes: Vec<TaskInstance> = (0..10)
            .map(|i| {
                let family = if i % 2 == 0 {
                    RuleFamily::operator_induction()
                } else {
                    RuleFamily::fake_word_inference()
                };
                sample_episode(&family, 4, &mut rng, true).unwrap()
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("episodes.jsonl");
        write_jsonl(&path, &episodes).unwrap();
        assert_eq!(read_jsonl(&path).unwrap(), episodes);
    }
}
