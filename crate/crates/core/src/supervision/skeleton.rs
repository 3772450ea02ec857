use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Keypoint names, the limb pairs that define body-part channels, and the
/// left/right permutation applied when an image is mirrored.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SkeletonSpec {
    pub name: String,
    pub keypoints: Vec<String>,
    pub edges: Vec<(usize, usize)>,
    /// `mirror[k]` is the index keypoint `k` becomes under a horizontal flip.
    pub mirror: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SkeletonText {
    name: String,
    keypoints: Vec<String>,
    edges: Vec<[String; 2]>,
    #[serde(default)]
    mirror: Vec<[String; 2]>,
}

const LSP14: [&str; 14] = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "r_wrist", "r_elbow", "r_shoulder", "l_shoulder",
    "l_elbow", "l_wrist", "neck", "head_top",
];

const MPII16: [&str; 16] = [
    "r_ankle", "r_knee", "r_hip", "l_hip", "l_knee", "l_ankle", "pelvis", "thorax", "upper_neck", "head_top",
    "r_wrist", "r_elbow", "r_shoulder", "l_shoulder", "l_elbow", "l_wrist",
];

impl SkeletonSpec {
    /// 14 keypoints, 13 limbs.
    pub fn lsp14() -> Self {
        let edges = [
            ("r_ankle", "r_knee"),
            ("r_knee", "r_hip"),
            ("l_hip", "l_knee"),
            ("l_knee", "l_ankle"),
            ("r_wrist", "r_elbow"),
            ("r_elbow", "r_shoulder"),
            ("l_shoulder", "l_elbow"),
            ("l_elbow", "l_wrist"),
            ("neck", "head_top"),
            ("r_shoulder", "neck"),
            ("l_shoulder", "neck"),
            ("r_hip", "r_shoulder"),
            ("l_hip", "l_shoulder"),
        ];
        Self::from_names("lsp14", &LSP14, &edges).expect("preset is valid")
    }

    /// 16 keypoints, 13 limbs.
    pub fn mpii16() -> Self {
        let edges = [
            ("r_ankle", "r_knee"),
            ("r_knee", "r_hip"),
            ("l_hip", "l_knee"),
            ("l_knee", "l_ankle"),
            ("r_wrist", "r_elbow"),
            ("r_elbow", "r_shoulder"),
            ("l_shoulder", "l_elbow"),
            ("l_elbow", "l_wrist"),
            ("upper_neck", "head_top"),
            ("thorax", "upper_neck"),
            ("pelvis", "thorax"),
            ("r_shoulder", "thorax"),
            ("l_shoulder", "thorax"),
        ];
        Self::from_names("mpii16", &MPII16, &edges).expect("preset is valid")
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "lsp14" => Ok(Self::lsp14()),
            "mpii16" => Ok(Self::mpii16()),
            other => Err(Error::Config(format!("unknown skeleton preset `{other}`"))),
        }
    }

    /// Builds a skeleton whose mirror pairs are inferred from `l_`/`r_` name prefixes.
    fn from_names(name: &str, keypoints: &[&str], edges: &[(&str, &str)]) -> Result<Self> {
        let mirror = keypoints
            .iter()
            .filter_map(|k| k.strip_prefix("r_").map(|rest| [k.to_string(), format!("l_{rest}")]))
            .collect();
        Self::from_text_repr(SkeletonText {
            name: name.into(),
            keypoints: keypoints.iter().map(|s| s.to_string()).collect(),
            edges: edges.iter().map(|(a, b)| [a.to_string(), b.to_string()]).collect(),
            mirror,
        })
    }

    pub fn num_keypoints(&self) -> usize {
        self.keypoints.len()
    }

    pub fn num_parts(&self) -> usize {
        self.edges.len()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.keypoints.iter().position(|k| k == name)
    }

    /// Parses the TOML text form (`name`, `keypoints`, `edges`, `mirror` as name pairs).
    pub fn from_text(text: &str) -> Result<Self> {
        let raw: SkeletonText = toml::from_str(text).map_err(|e| Error::Config(format!("skeleton: {e}")))?;
        Self::from_text_repr(raw)
    }

    pub fn to_text(&self) -> String {
        let mut pairs = Vec::new();
        for (a, &b) in self.mirror.iter().enumerate() {
            if a < b {
                pairs.push([self.keypoints[a].clone(), self.keypoints[b].clone()]);
            }
        }
        let raw = SkeletonText {
            name: self.name.clone(),
            keypoints: self.keypoints.clone(),
            edges: self
                .edges
                .iter()
                .map(|&(a, b)| [self.keypoints[a].clone(), self.keypoints[b].clone()])
                .collect(),
            mirror: pairs,
        };
        toml::to_string(&raw).expect("skeleton serializes")
    }

    fn from_text_repr(raw: SkeletonText) -> Result<Self> {
        let k = raw.keypoints.len();
        if k == 0 {
            return Err(Error::Config("skeleton has no keypoints".into()));
        }
        let lookup = |name: &str| {
            raw.keypoints
                .iter()
                .position(|k| k == name)
                .ok_or_else(|| Error::Config(format!("skeleton references unknown keypoint `{name}`")))
        };
        for (i, name) in raw.keypoints.iter().enumerate() {
            if raw.keypoints[..i].contains(name) {
                return Err(Error::Config(format!("duplicate keypoint `{name}`")));
            }
        }
        let mut edges = Vec::with_capacity(raw.edges.len());
        for [a, b] in &raw.edges {
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            if ia == ib {
                return Err(Error::Config(format!("edge `{a}`-`{b}` joins a keypoint to itself")));
            }
            edges.push((ia, ib));
        }
        let mut mirror: Vec<usize> = (0..k).collect();
        let mut paired = vec![false; k];
        for [a, b] in &raw.mirror {
            let (ia, ib) = (lookup(a)?, lookup(b)?);
            if ia == ib || paired[ia] || paired[ib] {
                return Err(Error::Config(format!("mirror pair `{a}`/`{b}` is not an involution")));
            }
            paired[ia] = true;
            paired[ib] = true;
            mirror[ia] = ib;
            mirror[ib] = ia;
        }
        Ok(Self {
            name: raw.name,
            keypoints: raw.keypoints,
            edges,
            mirror,
        })
    }
}
