//! Softmax and one-vs-all SVM classifiers over pooled descriptors.

mod softmax;
mod svm;

pub use softmax::{fit_bound, head_logits, softmax_loss, HeadNodes, SoftmaxHead};
pub use svm::{calibration_map, median, svm_calibrate, svm_train_binary, svm_train_ova, LinearSvm, SvmOptions};
