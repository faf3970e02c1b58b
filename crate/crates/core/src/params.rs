//! Named groups of trainable tensors and their graph bindings.

/// Declares a parameter struct of [`Tensor`](crate::Tensor) fields and a
/// matching struct of [`Var`](crate::Var) handles produced by `bind`.
macro_rules! param_group {
    ($(#[$meta:meta])* $name:ident => $vars:ident { $($field:ident),+ $(,)? }) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            $(pub $field: $crate::Tensor,)+
        }

        /// Graph handles for the tensors of the parameter group of the same shape.
        #[derive(Debug, Clone, Copy)]
        pub struct $vars {
            $(pub $field: $crate::Var,)+
        }

        impl $name {
            /// Registers every tensor as a graph leaf.
            pub fn bind(&self, g: &mut $crate::Graph) -> $vars {
                $vars { $($field: g.leaf(&self.$field),)+ }
            }

            pub fn named(&self) -> Vec<(&'static str, &$crate::Tensor)> {
                vec![$((stringify!($field), &self.$field),)+]
            }

            pub fn named_mut(&mut self) -> Vec<(&'static str, &mut $crate::Tensor)> {
                vec![$((stringify!($field), &mut self.$field),)+]
            }
        }

        impl $vars {
            /// Handles in the same order as `named`.
            pub fn all(&self) -> Vec<$crate::Var> {
                vec![$(self.$field,)+]
            }
        }
    };
}

pub(crate) use param_group;
