//! Logical tensor descriptors shared by the compiler, the binding layer and
//! the service.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    I8,
    I32,
    F32,
}

impl DType {
    pub fn size(self) -> u64 {
        match self {
            DType::I8 => 1,
            DType::I32 | DType::F32 => 4,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TensorClass {
    Weight,
    Activation,
    Input,
    Output,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub id: u32,
    pub name: String,
    pub class: TensorClass,
    pub size: u64,
    pub alignment: u64,
    pub dtype: DType,
    pub shape: Vec<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub tensors: Vec<TensorSpec>,
}

impl Manifest {
    pub fn get(&self, id: u32) -> Option<&TensorSpec> {
        self.tensors.iter().find(|t| t.id == id)
    }

    pub fn contains(&self, id: u32) -> bool {
        self.get(id).is_some()
    }

    pub fn of_class(&self, class: TensorClass) -> impl Iterator<Item = &TensorSpec> {
        self.tensors.iter().filter(move |t| t.class == class)
    }

    pub fn inputs(&self) -> impl Iterator<Item = &TensorSpec> {
        self.of_class(TensorClass::Input)
    }

    pub fn outputs(&self) -> impl Iterator<Item = &TensorSpec> {
        self.of_class(TensorClass::Output)
    }

    pub fn input_bytes(&self) -> u64 {
        self.inputs().map(|t| t.size).sum()
    }

    pub fn output_bytes(&self) -> u64 {
        self.outputs().map(|t| t.size).sum()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}
