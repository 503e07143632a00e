//! Scenario corpus files: a JSON header line followed by one JSON record per
//! scene. The drivable grid is run-length encoded as alternating run lengths,
//! starting with a (possibly empty) non-drivable run.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use super::{Agent, BevGrid, EgoState, Instruction, Scene};
use crate::codec::Trajectory;
use crate::error::{Error, Result};

pub const CORPUS_FORMAT: &str = "tokplan-corpus";
pub const CORPUS_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub format: String,
    pub version: u32,
    pub count: usize,
    /// Free-form split description, e.g. `{"train": 2000, "test": 200}`.
    #[serde(default)]
    pub split: serde_json::Value,
    #[serde(default)]
    pub config_hash: String,
    #[serde(default)]
    pub scene_config: serde_json::Value,
}

impl CorpusHeader {
    pub fn new(count: usize) -> Self {
        Self {
            format: CORPUS_FORMAT.into(),
            version: CORPUS_VERSION,
            count,
            split: serde_json::Value::Null,
            config_hash: String::new(),
            scene_config: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRecord {
    pub height: usize,
    pub width: usize,
    pub resolution: f64,
    pub x_min: f64,
    pub y_min: f64,
    pub runs: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneRecord {
    pub seed: u64,
    #[serde(default)]
    pub frame: usize,
    pub grid: GridRecord,
    pub agents: Vec<Agent>,
    pub instruction: Instruction,
    pub ego: EgoState,
    pub expert: Vec<[f64; 2]>,
    pub timestep: f64,
}

fn encode_runs(cells: &[bool]) -> Vec<usize> {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0;
    for &c in cells {
        if c == current {
            len += 1;
        } else {
            runs.push(len);
            current = c;
            len = 1;
        }
    }
    runs.push(len);
    runs
}

fn decode_runs(runs: &[usize], n: usize) -> Result<Vec<bool>> {
    let mut cells = Vec::with_capacity(n);
    for (i, &r) in runs.iter().enumerate() {
        cells.extend(std::iter::repeat(i % 2 == 1).take(r));
    }
    if cells.len() != n {
        return Err(Error::Format(format!("grid runs cover {} cells, expected {n}", cells.len())));
    }
    Ok(cells)
}

impl From<&Scene> for SceneRecord {
    fn from(s: &Scene) -> Self {
        let g = &s.grid;
        SceneRecord {
            seed: s.seed,
            frame: s.frame,
            grid: GridRecord {
                height: g.height,
                width: g.width,
                resolution: g.resolution,
                x_min: g.x_min,
                y_min: g.y_min,
                runs: encode_runs(&g.drivable),
            },
            agents: s.agents.clone(),
            instruction: s.instruction,
            ego: s.ego,
            expert: s.expert.waypoints.clone(),
            timestep: s.expert.timestep,
        }
    }
}

impl SceneRecord {
    pub fn into_scene(self) -> Result<Scene> {
        let g = self.grid;
        let cells = decode_runs(&g.runs, g.height * g.width)?;
        let grid = BevGrid::new(g.height, g.width, g.resolution, g.x_min, g.y_min, cells)?;
        let expert = Trajectory::with_timestep(self.expert, self.timestep)?;
        Ok(Scene { grid, agents: self.agents, instruction: self.instruction, ego: self.ego, expert, seed: self.seed, frame: self.frame })
    }
}

pub fn write_corpus<W: Write>(mut out: W, header: &CorpusHeader, scenes: &[Scene]) -> Result<()> {
    if header.count != scenes.len() {
        return Err(Error::Contract(format!("header count {} but {} scenes", header.count, scenes.len())));
    }
    serde_json::to_writer(&mut out, header)?;
    out.write_all(b"\n")?;
    for s in scenes {
        serde_json::to_writer(&mut out, &SceneRecord::from(s))?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_corpus<R: BufRead>(input: R) -> Result<(CorpusHeader, Vec<Scene>)> {
    let mut lines = input.lines().enumerate();
    let (_, first) = lines.next().ok_or(Error::Parse { line: 1, msg: "empty corpus file".into() })?;
    let header: CorpusHeader = serde_json::from_str(&first?).map_err(|e| Error::Parse { line: 1, msg: e.to_string() })?;
    if header.format != CORPUS_FORMAT || header.version != CORPUS_VERSION {
        return Err(Error::Parse { line: 1, msg: format!("unsupported corpus {} v{}", header.format, header.version) });
    }
    let mut scenes = Vec::with_capacity(header.count);
    for (i, line) in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SceneRecord = serde_json::from_str(&line).map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?;
        scenes.push(rec.into_scene().map_err(|e| Error::Parse { line: i + 1, msg: e.to_string() })?);
    }
    if scenes.len() != header.count {
        return Err(Error::Parse { line: 1, msg: format!("header declares {} scenes, found {}", header.count, scenes.len()) });
    }
    Ok((header, scenes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::codec::Vocabulary;
    use crate::scene::{generate_scene, SceneConfig};
    use proptest::prelude::*;

    #[test]
    fn corpus_round_trip() {
        let v = Vocabulary::default();
        let scenes: Vec<Scene> = (0..3).map(|s| generate_scene(s, &SceneConfig::default(), &v).unwrap()).collect();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &CorpusHeader::new(3), &scenes).unwrap();
        let (h, back) = read_corpus(&buf[..]).unwrap();
        assert_eq!(h.count, 3);
        assert_eq!(back, scenes);
    }

    #[test]
    fn empty_corpus_has_header() {
        let mut buf = Vec::new();
        write_corpus(&mut buf, &CorpusHeader::new(0), &[]).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap().lines().count(), 1);
        let (h, scenes) = read_corpus(&buf[..]).unwrap();
        assert_eq!((h.count, scenes.len()), (0, 0));
    }

    #[test]
    fn bad_record_reports_line() {
        let mut buf = Vec::new();
        write_corpus(&mut buf, &CorpusHeader::new(0), &[]).unwrap();
        buf.extend_from_slice(b"{\"seed\": 1}\n");
        match read_corpus(&buf[..]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    proptest! {
        #[test]
        fn runs_round_trip(cells in prop::collection::vec(any::<bool>(), 0..200)) {
            let runs = encode_runs(&cells);
            prop_assert_eq!(decode_runs(&runs, cells.len()).unwrap(), cells);
        }
    }
}
