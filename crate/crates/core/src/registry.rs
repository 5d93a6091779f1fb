//! Global label registry and per-client label subsets.
//!
//! Channel conventions used everywhere: channel 0 is background (never
//! listed as a label), global channel of the i-th registered label is
//! i + 1, and a client's head orders its labels by their registry
//! position.

use crate::error::{Error, Result};
use crate::tensor::LabelMap;
use std::collections::BTreeMap;
use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ClientId(pub String);

impl ClientId {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ClientId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for ClientId {
    fn from(s: &str) -> Self {
        ClientId(s.to_string())
    }
}

/// Global label set plus which clients annotate which labels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRegistry {
    global_labels: Vec<String>,
    client_labels: BTreeMap<ClientId, Vec<String>>,
}

impl LabelRegistry {
    /// Builds and validates a registry. Client label lists are stored in
    /// registry order regardless of input order.
    pub fn new(
        global_labels: Vec<String>,
        client_sets: BTreeMap<ClientId, Vec<String>>,
    ) -> Result<Self> {
        if global_labels.is_empty() {
            return Err(Error::InvalidArgument("empty global label set".into()));
        }
        for (i, l) in global_labels.iter().enumerate() {
            if global_labels[..i].contains(l) {
                return Err(Error::InvalidArgument(format!("duplicate global label '{l}'")));
            }
        }
        if client_sets.is_empty() {
            return Err(Error::InvalidArgument("no clients".into()));
        }
        let mut clients = BTreeMap::new();
        for (cid, set) in client_sets {
            if set.is_empty() {
                return Err(Error::InvalidArgument(format!(
                    "client '{cid}' has an empty label set"
                )));
            }
            for l in &set {
                if !global_labels.contains(l) {
                    return Err(Error::UnknownLabel(l.clone()));
                }
            }
            let ordered: Vec<String> = global_labels
                .iter()
                .filter(|g| set.contains(g))
                .cloned()
                .collect();
            if ordered.len() != set.len() {
                return Err(Error::InvalidArgument(format!(
                    "duplicate label in client '{cid}' set"
                )));
            }
            clients.insert(cid, ordered);
        }
        let reg = LabelRegistry {
            global_labels,
            client_labels: clients,
        };
        for (c, k) in reg.global_labels.iter().zip(reg.presence_counts()) {
            if k == 0 {
                return Err(Error::InvalidArgument(format!(
                    "label '{c}' is annotated by no client"
                )));
            }
        }
        Ok(reg)
    }

    pub fn global_labels(&self) -> &[String] {
        &self.global_labels
    }

    /// Number of global channels including background.
    pub fn num_global_channels(&self) -> usize {
        self.global_labels.len() + 1
    }

    pub fn clients(&self) -> impl Iterator<Item = &ClientId> {
        self.client_labels.keys()
    }

    pub fn num_clients(&self) -> usize {
        self.client_labels.len()
    }

    pub fn client_label_list(&self, client: &ClientId) -> Result<&[String]> {
        self.client_labels
            .get(client)
            .map(|v| v.as_slice())
            .ok_or_else(|| Error::UnknownHead(client.to_string()))
    }

    pub fn has_label(&self, client: &ClientId, label: &str) -> bool {
        self.client_labels
            .get(client)
            .map(|v| v.iter().any(|l| l == label))
            .unwrap_or(false)
    }

    /// Global channel index of a label (1-based; 0 is background).
    pub fn global_channel(&self, label: &str) -> Result<usize> {
        self.global_labels
            .iter()
            .position(|l| l == label)
            .map(|i| i + 1)
            .ok_or_else(|| Error::UnknownLabel(label.to_string()))
    }

    /// Head channel count for a client: background plus its labels.
    pub fn head_channels(&self, client: &ClientId) -> Result<usize> {
        Ok(self.client_label_list(client)?.len() + 1)
    }

    /// k vector: for each global label, the number of clients annotating it.
    pub fn presence_counts(&self) -> Vec<u32> {
        self.global_labels
            .iter()
            .map(|l| {
                self.client_labels
                    .values()
                    .filter(|set| set.iter().any(|x| x == l))
                    .count() as u32
            })
            .collect()
    }

    /// Maps a local head channel (0 = background) to the global channel.
    pub fn global_channel_of_local(&self, client: &ClientId, local: usize) -> Result<usize> {
        if local == 0 {
            return Ok(0);
        }
        let labels = self.client_label_list(client)?;
        let label = labels.get(local - 1).ok_or_else(|| {
            Error::InvalidArgument(format!(
                "local channel {local} out of range for client '{client}'"
            ))
        })?;
        self.global_channel(label)
    }

    /// Maps a global channel to the client's local head channel, if annotated.
    pub fn local_channel_of_global(&self, client: &ClientId, global: usize) -> Result<Option<usize>> {
        if global == 0 {
            return Ok(Some(0));
        }
        let label = self
            .global_labels
            .get(global - 1)
            .ok_or_else(|| Error::InvalidArgument(format!("global channel {global} out of range")))?;
        let labels = self.client_label_list(client)?;
        Ok(labels.iter().position(|l| l == label).map(|i| i + 1))
    }

    /// Rewrites a label map of global ids into a client's local channel
    /// space; labels the client does not annotate collapse to background.
    pub fn to_local_targets(&self, client: &ClientId, labels: &LabelMap) -> Result<LabelMap> {
        let n_global = self.num_global_channels();
        let mut lut = vec![0u32; n_global];
        for (g, slot) in lut.iter_mut().enumerate() {
            *slot = self.local_channel_of_global(client, g)?.unwrap_or(0) as u32;
        }
        let pixels = labels
            .pixels()
            .iter()
            .map(|&v| {
                lut.get(v as usize).copied().ok_or_else(|| {
                    Error::Data(format!("label id {v} exceeds registry size"))
                })
            })
            .collect::<Result<Vec<u32>>>()?;
        LabelMap::from_vec(labels.height(), labels.width(), pixels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> LabelRegistry {
        let globals = vec!["disk".into(), "square".into(), "ring".into()];
        let mut sets = BTreeMap::new();
        sets.insert(ClientId::from("a"), vec!["disk".into(), "ring".into()]);
        sets.insert(ClientId::from("b"), vec!["square".into(), "disk".into()]);
        LabelRegistry::new(globals, sets).unwrap()
    }

    #[test]
    fn presence_counts_match_sets() {
        assert_eq!(registry().presence_counts(), vec![2, 1, 1]);
    }

    #[test]
    fn client_labels_follow_registry_order() {
        let reg = registry();
        // input order was square-after-disk already; ring/disk for 'a' reorders
        assert_eq!(
            reg.client_label_list(&ClientId::from("b")).unwrap(),
            ["disk".to_string(), "square".to_string()]
        );
        assert_eq!(
            reg.client_label_list(&ClientId::from("a")).unwrap(),
            ["disk".to_string(), "ring".to_string()]
        );
    }

    #[test]
    fn channel_maps_are_inverse() {
        let reg = registry();
        let a = ClientId::from("a");
        for local in 0..reg.head_channels(&a).unwrap() {
            let g = reg.global_channel_of_local(&a, local).unwrap();
            assert_eq!(reg.local_channel_of_global(&a, g).unwrap(), Some(local));
        }
        // 'a' does not annotate square (global channel 2)
        assert_eq!(reg.local_channel_of_global(&a, 2).unwrap(), None);
    }

    #[test]
    fn rejects_empty_client_set() {
        let globals = vec!["disk".into()];
        let mut sets = BTreeMap::new();
        sets.insert(ClientId::from("a"), vec![]);
        assert!(LabelRegistry::new(globals, sets).is_err());
    }

    #[test]
    fn rejects_orphan_label() {
        let globals = vec!["disk".into(), "square".into()];
        let mut sets = BTreeMap::new();
        sets.insert(ClientId::from("a"), vec!["disk".into()]);
        assert!(LabelRegistry::new(globals, sets).is_err());
    }

    #[test]
    fn local_target_mapping_collapses_foreign_labels() {
        let reg = registry();
        let m = LabelMap::from_vec(1, 4, vec![0, 1, 2, 3]).unwrap();
        let local = reg.to_local_targets(&ClientId::from("a"), &m).unwrap();
        // disk -> 1, square -> bg, ring -> 2
        assert_eq!(local.pixels(), &[0, 1, 0, 2]);
    }
}
